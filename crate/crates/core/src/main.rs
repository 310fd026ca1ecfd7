fn main() -> std::process::ExitCode {
    cguda::cli::main_with_args(std::env::args_os())
}
