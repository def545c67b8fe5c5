use clap::Parser;

fn main() -> std::process::ExitCode {
    cyclic_cli::main_with(cyclic_cli::args::Cli::parse())
}
