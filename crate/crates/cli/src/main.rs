fn main() -> std::process::ExitCode {
    detno_cli::app::main()
}
