fn main() -> std::process::ExitCode {
    fundusq::cli::main()
}
