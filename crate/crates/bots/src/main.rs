use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use colloquy_bots::concierge::{Concierge, ConciergeConfig};
use colloquy_bots::dito::{Dito, DitoConfig};
use colloquy_bots::moderator::{DropMessages, DropTokens, InsertEvery, Moderator, ModeratorConfig, RelayFilter};
use colloquy_bots::{echo, Bot, BotConfig, Endpoint};
use colloquy_core::clock::SystemClock;

#[derive(Parser)]
#[command(name = "colloquy-bot", version, about = "Reference bots for the colloquy server")]
struct Cli {
    #[command(flatten)]
    conn: Conn,
    #[arg(long, global = true, env = "COLLOQUY_LOG_LEVEL", default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    bot: BotKind,
}

#[derive(Args)]
struct Conn {
    #[arg(long, global = true, env = "COLLOQUY_TOKEN", default_value = "")]
    token: String,
    #[arg(long, global = true, env = "COLLOQUY_GATEWAY_URL", default_value = "ws://127.0.0.1:5000/chat")]
    gateway_url: String,
    #[arg(long, global = true, env = "COLLOQUY_API_URL", default_value = "http://127.0.0.1:5000/api/v1")]
    api_url: String,
    #[arg(long, global = true)]
    name: Option<String>,
}

#[derive(Subcommand)]
enum BotKind {
    /// Repeat every human message.
    Echo,
    /// Match waiting users into task rooms.
    Concierge {
        /// Room the concierge watches.
        #[arg(long, env = "COLLOQUY_WAITING_ROOM")]
        waiting_room: String,
        /// Seconds before a lone waiter is compensated.
        #[arg(long, default_value_t = 300)]
        timeout_secs: u64,
        /// Per-task override, `task_id=seconds`. Repeatable.
        #[arg(long = "task-timeout", value_parser = parse_task_timeout)]
        task_timeouts: Vec<(u64, u64)>,
        #[arg(long, env = "COLLOQUY_CODE_SECRET", default_value = "colloquy")]
        code_secret: String,
        #[arg(long, default_value = "")]
        code_prefix: String,
    },
    /// Two-player find-the-difference task.
    Dito {
        /// JSON array of {"a": url, "b": url}.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value = "image")]
        image_element: String,
        /// File whose contents replace the default instructions.
        #[arg(long)]
        instructions: Option<PathBuf>,
        #[arg(long, env = "COLLOQUY_CODE_SECRET", default_value = "colloquy")]
        code_secret: String,
    },
    /// Round-robin turns and/or relay filtering.
    Moderator {
        #[arg(long)]
        turns: bool,
        #[arg(long)]
        relay: bool,
        /// Drop whole relayed messages containing this string.
        #[arg(long)]
        drop_messages: Vec<String>,
        /// Remove relayed tokens containing this string.
        #[arg(long)]
        drop_tokens: Vec<String>,
        /// Insert `--insert-text` after every N relayed messages.
        #[arg(long)]
        insert_every: Option<u64>,
        #[arg(long, default_value = "...")]
        insert_text: String,
    },
}

fn parse_task_timeout(s: &str) -> Result<(u64, u64), String> {
    let (t, secs) = s.split_once('=').ok_or("expected task_id=seconds")?;
    Ok((t.parse().map_err(|e| format!("{e}"))?, secs.parse().map_err(|e| format!("{e}"))?))
}

async fn run(cli: Cli) -> anyhow::Result<()> {
    anyhow::ensure!(!cli.conn.token.is_empty(), "--token is required");
    let endpoint = Endpoint::Remote { chat_url: cli.conn.gateway_url, api_url: cli.conn.api_url };
    let mut config = BotConfig::new(endpoint, cli.conn.token);
    config.name = cli.conn.name;
    let bot = Bot::connect(config).await?;
    tracing::info!("connected as {} (user {})", bot.me().name, bot.id());
    match cli.bot {
        BotKind::Echo => echo::install(&bot),
        BotKind::Concierge { waiting_room, timeout_secs, task_timeouts, code_secret, code_prefix } => {
            let mut c = ConciergeConfig::new(waiting_room);
            c.timeout = Duration::from_secs(timeout_secs);
            c.per_task_timeout = task_timeouts.into_iter().map(|(t, s)| (colloquy_core::model::TaskId(t), Duration::from_secs(s))).collect();
            c.code_secret = code_secret.into_bytes();
            c.code_prefix = code_prefix;
            let concierge = Concierge::attach(bot.clone(), c, Arc::new(SystemClock)).await?;
            concierge.spawn_timer(Duration::from_secs(1));
        }
        BotKind::Dito { pairs, image_element, instructions, code_secret } => {
            let mut c = DitoConfig::new(DitoConfig::load_pairs(&pairs)?);
            c.image_element = image_element;
            if let Some(path) = instructions {
                c.instructions = std::fs::read_to_string(path)?.trim().to_string();
            }
            c.code_secret = code_secret.into_bytes();
            Dito::install(&bot, c);
        }
        BotKind::Moderator { turns, relay, drop_messages, drop_tokens, insert_every, insert_text } => {
            let mut filters: Vec<Box<dyn RelayFilter>> = Vec::new();
            filters.extend(drop_messages.into_iter().map(|s| Box::new(DropMessages(s)) as Box<dyn RelayFilter>));
            filters.extend(drop_tokens.into_iter().map(|s| Box::new(DropTokens(s)) as Box<dyn RelayFilter>));
            if let Some(every) = insert_every {
                filters.push(Box::new(InsertEvery { every, text: insert_text }));
            }
            let mut c = if turns { ModeratorConfig::turns() } else { ModeratorConfig::default() };
            if relay || !filters.is_empty() {
                c.relay = Some(filters);
            }
            Moderator::install(&bot, c);
        }
    }
    let code = tokio::select! {
        code = bot.run() => code,
        _ = tokio::signal::ctrl_c() => {
            bot.stop();
            bot.closed().await
        }
    };
    match code {
        Some(c) if c >= 4000 => anyhow::bail!("session ended with close code {c}"),
        _ => Ok(()),
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
