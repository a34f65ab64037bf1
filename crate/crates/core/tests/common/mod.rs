#![allow(dead_code)]

pub mod fuzz;

use std::path::{Path, PathBuf};

use langcoop::backends::BackendFile;
use langcoop::harness::RunConfig;

pub fn root() -> &'static Path {
    Path::new(env!("CARGO_MANIFEST_DIR"))
}

pub fn scenario(name: &str) -> PathBuf {
    root().join("scenarios").join(format!("{name}.toml"))
}

pub fn scripted() -> BackendFile {
    BackendFile::load(&root().join("backends/scripted.toml")).unwrap()
}

pub fn config(name: &str) -> RunConfig {
    RunConfig::new(scenario(name), scripted())
}

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use langcoop::backends::{BackendConfig, BackendKind};
use langcoop::m3cot::StageAssignment;

/// A local chat-completions endpoint. Each answer carries a speed that
/// depends on arrival order, so answers are not a function of the prompt.
pub struct StubServer {
    pub url: String,
    pub calls: Arc<AtomicU64>,
}

fn serve(mut stream: TcpStream, calls: &AtomicU64) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut len = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        if let Some((k, v)) = l.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body)?;
    let n = calls.fetch_add(1, Ordering::SeqCst);
    let speed = 6.0 + (n % 5) as f64 * 0.5;
    let content = format!(
        "Reason: keep the lane.\nSEGMENTS: ({speed:.1}, 0.0000, 1.0), ({speed:.1}, 0.0000, 1.0)"
    );
    let json = serde_json::json!({
        "choices": [{ "message": { "role": "assistant", "content": content } }],
        "usage": { "prompt_tokens": body.len() / 4, "completion_tokens": 20 }
    })
    .to_string();
    write!(
        stream,
        "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{json}",
        json.len()
    )?;
    stream.flush()
}

pub fn stub_server() -> StubServer {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let calls = Arc::new(AtomicU64::new(0));
    let c = calls.clone();
    std::thread::spawn(move || {
        for s in listener.incoming().flatten() {
            let c = c.clone();
            std::thread::spawn(move || {
                let _ = serve(s, &c);
            });
        }
    });
    StubServer { url, calls }
}

/// Every stage on one live backend pointed at `url`.
pub fn live(url: &str) -> BackendFile {
    BackendFile {
        backends: vec![BackendConfig {
            id: "stub".into(),
            kind: BackendKind::HttpChat {
                endpoint: url.into(),
                model: "stub-model".into(),
                credential_env: None,
                timeout_s: 10.0,
                max_tokens: 64,
                temperature: 0.0,
                min_interval_s: 0.0,
            },
        }],
        assignment: StageAssignment::uniform("stub"),
        agents: Default::default(),
    }
}
