use std::process::ExitCode;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let mut stdout = std::io::stdout().lock();
    let mut stderr = std::io::stderr().lock();
    let code = clusternet_cli::cli::main_with_args(&args, &mut stdout, &mut stderr);
    ExitCode::from(code as u8)
}
