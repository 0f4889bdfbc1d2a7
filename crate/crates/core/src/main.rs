use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VGCE_LOG", "warn")).init();
    if let Err(err) = vgce::cli::run(vgce::cli::Cli::parse()) {
        // sources already embedded in their parent's message are skipped
        let mut line = String::new();
        for cause in err.chain().map(|e| e.to_string()) {
            if !line.ends_with(&cause) {
                if !line.is_empty() {
                    line.push_str(": ");
                }
                line.push_str(&cause);
            }
        }
        eprintln!("error: {line}");
        std::process::exit(1);
    }
}
