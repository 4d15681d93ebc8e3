use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let config = std::env::var_os("GGCN_CONFIG").map(PathBuf::from);
    let code = gatedgcn::cli::run(
        &args,
        config.as_deref(),
        &mut io::stdout(),
        &mut io::stderr(),
    );
    ExitCode::from(code.clamp(0, 255) as u8)
}
