use clap::Parser;

fn main() {
    let cli = sublap::Cli::parse();
    if let Err(err) = sublap::run(&cli) {
        // Some errors already embed their source in their message.
        let mut msg = err.to_string();
        for cause in err.chain().skip(1) {
            let text = cause.to_string();
            if !msg.contains(&text) {
                msg.push_str(": ");
                msg.push_str(&text);
            }
        }
        eprintln!("error: {msg}");
        std::process::exit(sublap::exit_code(&err));
    }
}
