use std::panic;
use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    // Panics are internal failures.
    let code = panic::catch_unwind(|| mvscene::cli::main_with_args(std::env::args_os())).unwrap_or(3);
    ExitCode::from(code as u8)
}
