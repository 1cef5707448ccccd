use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use colloquy_server::{start, ServerConfig};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "colloquy", version, about = "Real-time dialog experiment server")]
struct Cli {
    /// Log filter, e.g. `info` or `colloquy_server=debug`.
    #[arg(long, global = true, env = "COLLOQUY_LOG_LEVEL", default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the server.
    Serve(ServeArgs),
    /// Create layouts, rooms, tasks and tokens from a bundle file on a running server.
    Load(LoadArgs),
    /// Mint one token on a running server.
    Token(TokenArgs),
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "COLLOQUY_HOST", default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    #[arg(long, env = "COLLOQUY_PORT", default_value_t = 5000)]
    port: u16,
    #[arg(long, env = "COLLOQUY_DATA_DIR", default_value = "./data")]
    data_dir: PathBuf,
    /// Lift the element and attribute whitelists for layouts.
    #[arg(long, env = "COLLOQUY_UNSAFE_HTML")]
    unsafe_html: bool,
}

#[derive(Args)]
struct Remote {
    #[arg(long, env = "COLLOQUY_API_URL", default_value = "http://127.0.0.1:5000/api/v1")]
    api_url: String,
    /// Bearer token with admin permissions.
    #[arg(long, env = "COLLOQUY_TOKEN")]
    token: String,
}

#[derive(Args)]
struct LoadArgs {
    bundle: PathBuf,
    #[command(flatten)]
    remote: Remote,
}

#[derive(Args)]
struct TokenArgs {
    #[command(flatten)]
    remote: Remote,
    /// Comma-separated permission names.
    #[arg(long, value_delimiter = ',')]
    permissions: Vec<String>,
    #[arg(long)]
    room: Option<String>,
    #[arg(long)]
    task: Option<u64>,
    #[arg(long, default_value_t = 1)]
    uses: u32,
    #[arg(long, default_value = "human")]
    kind: String,
    /// Hide a bot from human rosters.
    #[arg(long)]
    hidden: bool,
}

fn chat_base(api_url: &str) -> String {
    api_url.trim_end_matches('/').trim_end_matches("/api/v1").to_string() + "/chat"
}

async fn post(remote: &Remote, path: &str, body: &Value) -> anyhow::Result<Value> {
    let url = format!("{}{path}", remote.api_url.trim_end_matches('/'));
    let resp = reqwest::Client::new().post(&url).bearer_auth(&remote.token).json(body).send().await.with_context(|| url.clone())?;
    let status = resp.status();
    let body: Value = resp.json().await.unwrap_or(Value::Null);
    if !status.is_success() {
        bail!("{url}: {status}: {body}");
    }
    Ok(body)
}

fn print_token(base: &str, token: &Value) {
    let id = token["id"].as_str().unwrap_or_default();
    println!("{id}\t{base}?token={id}");
}

async fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Serve(args) => {
            let config = ServerConfig {
                bind: SocketAddr::new(args.host, args.port),
                data_dir: Some(args.data_dir),
                unsafe_html: args.unsafe_html,
                ..Default::default()
            };
            let server = start(config).await?;
            println!("listening on http://{}", server.addr);
            println!("admin token: {}", server.admin_token);
            println!("api: {}", server.api_url());
            tokio::signal::ctrl_c().await?;
            tracing::info!("shutting down");
            server.shutdown().await;
            Ok(())
        }
        Command::Load(args) => {
            let text = std::fs::read_to_string(&args.bundle).with_context(|| args.bundle.display().to_string())?;
            let bundle: Value = serde_json::from_str(&text).context("bundle is not valid JSON")?;
            let result = post(&args.remote, "/bundles", &bundle).await?;
            for (name, id) in result["layouts"].as_object().into_iter().flatten() {
                println!("layout {name} = {id}");
            }
            for id in result["rooms"].as_array().into_iter().flatten() {
                println!("room {}", id.as_str().unwrap_or_default());
            }
            for (name, id) in result["tasks"].as_object().into_iter().flatten() {
                println!("task {name} = {id}");
            }
            let base = chat_base(&args.remote.api_url);
            for t in result["tokens"].as_array().into_iter().flatten() {
                print_token(&base, t);
            }
            Ok(())
        }
        Command::Token(args) => {
            let body = json!({
                "permissions": args.permissions,
                "login_room_id": args.room,
                "task_id": args.task,
                "uses": args.uses,
                "kind": args.kind,
                "visible_in_roster": !args.hidden,
            });
            let token = post(&args.remote, "/tokens", &body).await?;
            print_token(&chat_base(&args.remote.api_url), &token);
            Ok(())
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_new(&cli.log_level).unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(cli).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
