fn main() -> std::process::ExitCode {
    mvgnn_cli::run_main()
}
