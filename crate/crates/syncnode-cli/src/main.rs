use clap::Parser;
use syncnode_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
        }
        Err(e) => {
            eprintln!("syncnode: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
