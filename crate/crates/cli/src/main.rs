use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = iwm_cli::Cli::parse();
    if let Err(e) = iwm_cli::init_workers().and_then(|_| iwm_cli::run(cli)) {
        let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
        eprintln!("{}", serde_json::json!({ "error": chain[0], "causes": &chain[1..] }));
        std::process::exit(1);
    }
}
