use clap::Parser;
use shardlearn_cli::{run, Cli, Runtime};

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let rt = Runtime::from_env()?;
    println!("{}", run(&cli, rt)?);
    Ok(())
}
