fn main() -> std::process::ExitCode {
    psnet::cli::main_with_args(std::env::args_os())
}
