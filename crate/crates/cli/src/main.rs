use clap::Parser;
use serde_json::json;
use xlin_cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
        }
        Err(e) => {
            let category = e.category().to_string();
            println!(
                "{}",
                json!({ "command": cli.command.name(), "ok": false, "category": category, "error": e.to_string() })
            );
            eprintln!("xlin {}: {category} error: {e}", cli.command.name());
            std::process::exit(e.exit_code());
        }
    }
}
