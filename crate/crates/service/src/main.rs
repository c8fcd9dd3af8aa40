use clap::Parser;

fn main() -> anyhow::Result<()> {
    atlas_service::cli::run(atlas_service::cli::Cli::parse())
}
