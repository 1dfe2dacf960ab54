use clap::Parser;

fn main() {
    let cli = treemdn_cli::Cli::parse();
    if let Err(err) = treemdn_cli::run(cli) {
        let message = format!("{err:#}").replace('\n', " ");
        eprintln!("error: {message}");
        std::process::exit(1);
    }
}
