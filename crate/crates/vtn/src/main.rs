use clap::Parser;

fn main() {
    let cli = vtn::cli::Cli::parse();
    let code = vtn::cli::run(cli, &mut std::io::stdout(), &mut std::io::stderr());
    std::process::exit(code);
}
