//! Convolutional backbones, expressed as ordered named stages so that any
//! stage output can be tapped (Grad-CAM) or frozen (fine-tuning).

use candle_core::Tensor;

use super::layers::{
    avg_pool3_same, export_avg_pool3_same, export_max_pool, BasicConv, Conv2d, ParamStore,
};
use super::onnx::GraphBuilder;
use super::Result;

pub trait Stage: Send + Sync {
    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor>;
    fn export(&self, g: &mut GraphBuilder, input: &str) -> Result<String>;
}

pub struct NamedStage {
    pub name: &'static str,
    pub stage: Box<dyn Stage>,
}

fn named(name: &'static str, stage: impl Stage + 'static) -> NamedStage {
    NamedStage {
        name,
        stage: Box::new(stage),
    }
}

// ---------------------------------------------------------------- small cnn

/// Conv + bias + ReLU, optionally followed by 2x2 max pooling.
struct ConvRelu {
    conv: Conv2d,
    pool: bool,
}

impl Stage for ConvRelu {
    fn forward_t(&self, x: &Tensor, _train: bool) -> Result<Tensor> {
        let y = self.conv.forward(x)?.relu()?;
        if self.pool {
            Ok(y.max_pool2d(2)?)
        } else {
            Ok(y)
        }
    }

    fn export(&self, g: &mut GraphBuilder, input: &str) -> Result<String> {
        let c = self.conv.export(g, input)?;
        let r = g.node("Relu", "", vec![c], vec![]);
        Ok(if self.pool {
            export_max_pool(g, &r, 2, 2)
        } else {
            r
        })
    }
}

pub const SMALL_CNN_CHANNELS: usize = 32;

/// Three conv stages (16, 32, 32 channels); meant for tests and desk runs.
pub fn small_cnn(store: &mut ParamStore) -> Result<(Vec<NamedStage>, usize)> {
    let mk = |store: &mut ParamStore, name: &str, cin, cout, pool| -> Result<ConvRelu> {
        Ok(ConvRelu {
            conv: Conv2d::new(store, name, cin, cout, (3, 3), 1, (1, 1), true)?,
            pool,
        })
    };
    let stages = vec![
        named("conv1", mk(store, "backbone.conv1", 3, 16, true)?),
        named("conv2", mk(store, "backbone.conv2", 16, 32, true)?),
        named(
            "conv3",
            mk(store, "backbone.conv3", 32, SMALL_CNN_CHANNELS, false)?,
        ),
    ];
    Ok((stages, SMALL_CNN_CHANNELS))
}

// ------------------------------------------------------------- inception v3

struct Basic(BasicConv);

impl Stage for Basic {
    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.0.forward_t(x, train)
    }
    fn export(&self, g: &mut GraphBuilder, input: &str) -> Result<String> {
        self.0.export(g, input)
    }
}

struct MaxPool3s2;

impl Stage for MaxPool3s2 {
    fn forward_t(&self, x: &Tensor, _train: bool) -> Result<Tensor> {
        Ok(x.max_pool2d_with_stride(3, 2)?)
    }
    fn export(&self, g: &mut GraphBuilder, input: &str) -> Result<String> {
        Ok(export_max_pool(g, input, 3, 2))
    }
}

/// A branch is a chain of convolutions, optionally preceded by a pool.
enum Pre {
    None,
    AvgSame,
    Max3s2,
}

struct Branch {
    pre: Pre,
    convs: Vec<BasicConv>,
    /// Trailing split into two parallel convs whose outputs are concatenated.
    fork: Option<(BasicConv, BasicConv)>,
}

impl Branch {
    fn chain(convs: Vec<BasicConv>) -> Self {
        Self {
            pre: Pre::None,
            convs,
            fork: None,
        }
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut y = match self.pre {
            Pre::None => x.clone(),
            Pre::AvgSame => avg_pool3_same(x)?,
            Pre::Max3s2 => x.max_pool2d_with_stride(3, 2)?,
        };
        for c in &self.convs {
            y = c.forward_t(&y, train)?;
        }
        if let Some((a, b)) = &self.fork {
            y = Tensor::cat(&[a.forward_t(&y, train)?, b.forward_t(&y, train)?], 1)?;
        }
        Ok(y)
    }

    fn export(&self, g: &mut GraphBuilder, input: &str) -> Result<String> {
        let mut y = match self.pre {
            Pre::None => input.to_string(),
            Pre::AvgSame => export_avg_pool3_same(g, input),
            Pre::Max3s2 => export_max_pool(g, input, 3, 2),
        };
        for c in &self.convs {
            y = c.export(g, &y)?;
        }
        if let Some((a, b)) = &self.fork {
            let ya = a.export(g, &y)?;
            let yb = b.export(g, &y)?;
            y = g.node(
                "Concat",
                "",
                vec![ya, yb],
                vec![GraphBuilder::int("axis", 1)],
            );
        }
        Ok(y)
    }
}

struct Mixed {
    branches: Vec<Branch>,
}

impl Stage for Mixed {
    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let outs = self
            .branches
            .iter()
            .map(|b| b.forward_t(x, train))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&outs, 1)?)
    }

    fn export(&self, g: &mut GraphBuilder, input: &str) -> Result<String> {
        let outs = self
            .branches
            .iter()
            .map(|b| b.export(g, input))
            .collect::<Result<Vec<_>>>()?;
        Ok(g.node("Concat", "", outs, vec![GraphBuilder::int("axis", 1)]))
    }
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Builder<'_> {
    fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: (usize, usize),
        stride: usize,
        pad: (usize, usize),
    ) -> Result<BasicConv> {
        BasicConv::new(
            self.store,
            &format!("{}.{name}", self.prefix),
            cin,
            cout,
            k,
            stride,
            pad,
        )
    }

    fn sq(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<BasicConv> {
        self.conv(name, cin, cout, (k, k), stride, (pad, pad))
    }
}

fn builder<'a>(store: &'a mut ParamStore, block: &str) -> Builder<'a> {
    Builder {
        store,
        prefix: format!("backbone.{block}"),
    }
}

fn inception_a(
    store: &mut ParamStore,
    block: &str,
    cin: usize,
    pool_features: usize,
) -> Result<Mixed> {
    let mut b = builder(store, block);
    let branches = vec![
        Branch::chain(vec![b.sq("branch1x1", cin, 64, 1, 1, 0)?]),
        Branch::chain(vec![
            b.sq("branch5x5_1", cin, 48, 1, 1, 0)?,
            b.sq("branch5x5_2", 48, 64, 5, 1, 2)?,
        ]),
        Branch::chain(vec![
            b.sq("branch3x3dbl_1", cin, 64, 1, 1, 0)?,
            b.sq("branch3x3dbl_2", 64, 96, 3, 1, 1)?,
            b.sq("branch3x3dbl_3", 96, 96, 3, 1, 1)?,
        ]),
        Branch {
            pre: Pre::AvgSame,
            convs: vec![b.sq("branch_pool", cin, pool_features, 1, 1, 0)?],
            fork: None,
        },
    ];
    Ok(Mixed { branches })
}

fn inception_b(store: &mut ParamStore, block: &str, cin: usize) -> Result<Mixed> {
    let mut b = builder(store, block);
    let branches = vec![
        Branch::chain(vec![b.sq("branch3x3", cin, 384, 3, 2, 0)?]),
        Branch::chain(vec![
            b.sq("branch3x3dbl_1", cin, 64, 1, 1, 0)?,
            b.sq("branch3x3dbl_2", 64, 96, 3, 1, 1)?,
            b.sq("branch3x3dbl_3", 96, 96, 3, 2, 0)?,
        ]),
        Branch {
            pre: Pre::Max3s2,
            convs: vec![],
            fork: None,
        },
    ];
    Ok(Mixed { branches })
}

fn inception_c(store: &mut ParamStore, block: &str, cin: usize, c7: usize) -> Result<Mixed> {
    let mut b = builder(store, block);
    let branches = vec![
        Branch::chain(vec![b.sq("branch1x1", cin, 192, 1, 1, 0)?]),
        Branch::chain(vec![
            b.sq("branch7x7_1", cin, c7, 1, 1, 0)?,
            b.conv("branch7x7_2", c7, c7, (1, 7), 1, (0, 3))?,
            b.conv("branch7x7_3", c7, 192, (7, 1), 1, (3, 0))?,
        ]),
        Branch::chain(vec![
            b.sq("branch7x7dbl_1", cin, c7, 1, 1, 0)?,
            b.conv("branch7x7dbl_2", c7, c7, (7, 1), 1, (3, 0))?,
            b.conv("branch7x7dbl_3", c7, c7, (1, 7), 1, (0, 3))?,
            b.conv("branch7x7dbl_4", c7, c7, (7, 1), 1, (3, 0))?,
            b.conv("branch7x7dbl_5", c7, 192, (1, 7), 1, (0, 3))?,
        ]),
        Branch {
            pre: Pre::AvgSame,
            convs: vec![b.sq("branch_pool", cin, 192, 1, 1, 0)?],
            fork: None,
        },
    ];
    Ok(Mixed { branches })
}

fn inception_d(store: &mut ParamStore, block: &str, cin: usize) -> Result<Mixed> {
    let mut b = builder(store, block);
    let branches = vec![
        Branch::chain(vec![
            b.sq("branch3x3_1", cin, 192, 1, 1, 0)?,
            b.sq("branch3x3_2", 192, 320, 3, 2, 0)?,
        ]),
        Branch::chain(vec![
            b.sq("branch7x7x3_1", cin, 192, 1, 1, 0)?,
            b.conv("branch7x7x3_2", 192, 192, (1, 7), 1, (0, 3))?,
            b.conv("branch7x7x3_3", 192, 192, (7, 1), 1, (3, 0))?,
            b.sq("branch7x7x3_4", 192, 192, 3, 2, 0)?,
        ]),
        Branch {
            pre: Pre::Max3s2,
            convs: vec![],
            fork: None,
        },
    ];
    Ok(Mixed { branches })
}

fn inception_e(store: &mut ParamStore, block: &str, cin: usize) -> Result<Mixed> {
    let mut b = builder(store, block);
    let branches = vec![
        Branch::chain(vec![b.sq("branch1x1", cin, 320, 1, 1, 0)?]),
        Branch {
            pre: Pre::None,
            convs: vec![b.sq("branch3x3_1", cin, 384, 1, 1, 0)?],
            fork: Some((
                b.conv("branch3x3_2a", 384, 384, (1, 3), 1, (0, 1))?,
                b.conv("branch3x3_2b", 384, 384, (3, 1), 1, (1, 0))?,
            )),
        },
        Branch {
            pre: Pre::None,
            convs: vec![
                b.sq("branch3x3dbl_1", cin, 448, 1, 1, 0)?,
                b.sq("branch3x3dbl_2", 448, 384, 3, 1, 1)?,
            ],
            fork: Some((
                b.conv("branch3x3dbl_3a", 384, 384, (1, 3), 1, (0, 1))?,
                b.conv("branch3x3dbl_3b", 384, 384, (3, 1), 1, (1, 0))?,
            )),
        },
        Branch {
            pre: Pre::AvgSame,
            convs: vec![b.sq("branch_pool", cin, 192, 1, 1, 0)?],
            fork: None,
        },
    ];
    Ok(Mixed { branches })
}

pub const INCEPTION_CHANNELS: usize = 2048;
pub const INCEPTION_MIN_INPUT: usize = 75;

/// The Inception-V3 feature extractor (no auxiliary classifier).
pub fn inception_v3(store: &mut ParamStore) -> Result<(Vec<NamedStage>, usize)> {
    let stem = |store: &mut ParamStore, name: &str, cin, cout, k, stride, pad| -> Result<Basic> {
        Ok(Basic(BasicConv::square(
            store,
            &format!("backbone.{name}"),
            cin,
            cout,
            k,
            stride,
            pad,
        )?))
    };
    let stages = vec![
        named(
            "Conv2d_1a_3x3",
            stem(store, "Conv2d_1a_3x3", 3, 32, 3, 2, 0)?,
        ),
        named(
            "Conv2d_2a_3x3",
            stem(store, "Conv2d_2a_3x3", 32, 32, 3, 1, 0)?,
        ),
        named(
            "Conv2d_2b_3x3",
            stem(store, "Conv2d_2b_3x3", 32, 64, 3, 1, 1)?,
        ),
        named("maxpool1", MaxPool3s2),
        named(
            "Conv2d_3b_1x1",
            stem(store, "Conv2d_3b_1x1", 64, 80, 1, 1, 0)?,
        ),
        named(
            "Conv2d_4a_3x3",
            stem(store, "Conv2d_4a_3x3", 80, 192, 3, 1, 0)?,
        ),
        named("maxpool2", MaxPool3s2),
        named("Mixed_5b", inception_a(store, "Mixed_5b", 192, 32)?),
        named("Mixed_5c", inception_a(store, "Mixed_5c", 256, 64)?),
        named("Mixed_5d", inception_a(store, "Mixed_5d", 288, 64)?),
        named("Mixed_6a", inception_b(store, "Mixed_6a", 288)?),
        named("Mixed_6b", inception_c(store, "Mixed_6b", 768, 128)?),
        named("Mixed_6c", inception_c(store, "Mixed_6c", 768, 160)?),
        named("Mixed_6d", inception_c(store, "Mixed_6d", 768, 160)?),
        named("Mixed_6e", inception_c(store, "Mixed_6e", 768, 192)?),
        named("Mixed_7a", inception_d(store, "Mixed_7a", 768)?),
        named("Mixed_7b", inception_e(store, "Mixed_7b", 1280)?),
        named("Mixed_7c", inception_e(store, "Mixed_7c", 2048)?),
    ];
    Ok((stages, INCEPTION_CHANNELS))
}
