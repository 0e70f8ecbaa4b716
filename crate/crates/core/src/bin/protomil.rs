use clap::Parser;

fn main() -> anyhow::Result<()> {
    protomil::cli::run(&protomil::cli::Cli::parse())
}
