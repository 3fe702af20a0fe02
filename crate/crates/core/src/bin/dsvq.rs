fn main() -> std::process::ExitCode {
    dsvq::cli::main()
}
