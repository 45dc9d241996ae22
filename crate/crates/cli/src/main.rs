use clap::Parser;

fn main() -> anyhow::Result<()> {
    let cli = mfg_cli::Cli::parse();
    let code = mfg_cli::run(cli);
    if code != 0 {
        std::process::exit(code);
    }
    Ok(())
}
