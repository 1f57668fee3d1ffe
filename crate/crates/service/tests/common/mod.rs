#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use clinflow::config::TEST_PHYSICIAN_TIMEOUT;
use clinflow::http::{self, AppState};
use clinflow::sessions::SessionManager;
use clinflow::DirectorSource;
use clinflow_core::llm::{ReplayEntry, ReplayModel};
use clinflow_core::metrics::EvalConfig;
use clinflow_core::SessionConfig;

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn entry(case_id: &str, text: &str) -> ReplayEntry {
    ReplayEntry {
        case_id: Some(case_id.into()),
        ..ReplayEntry::text(text)
    }
}

/// Two cases, each with one physician request before the final diagnosis.
pub fn two_case_director() -> DirectorSource {
    DirectorSource::Replay(Arc::new(ReplayModel::new(vec![
        entry("h1", "[Deep Think] 1: Pancreas?\n[Question] 1 <Physician>: Measure serum lipase."),
        entry("h1", "[Final Diagnosis]: Lipase [1]. So the final answer is acute pancreatitis."),
        entry("h2", "[Deep Think] 1: Heart?\n[Question] 1 <Physician>: Record an ECG."),
        entry("h2", "[Final Diagnosis]: ECG [1]. So the final answer is myocardial infarction."),
        entry("adhoc", "[Deep Think] 1: Unknown.\n[Question] 1 <Physician>: Check temperature."),
        entry("adhoc", "[Final Diagnosis]: Fever [1]. So the final answer is influenza."),
    ])))
}

pub fn case_json(case_id: &str, section: (&str, &str), gold: &str) -> Value {
    json!({
        "case_id": case_id,
        "question": "What is the most likely diagnosis?",
        "chief_complaint": "I feel unwell.",
        "clinical_info": { "case_id": case_id, "sections": [ { "label": section.0, "content": section.1 } ] },
        "gold_answer": gold,
    })
}

pub struct Server {
    pub base: String,
    pub manager: Arc<SessionManager>,
    _runtime: tokio::runtime::Runtime,
}

pub fn spawn_server(director: DirectorSource, log_dir: Option<PathBuf>, token: Option<&str>) -> Server {
    let manager = Arc::new(SessionManager::new(
        director,
        SessionConfig::default(),
        EvalConfig::default(),
        TEST_PHYSICIAN_TIMEOUT,
        log_dir,
    ));
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .unwrap();
    let listener = runtime
        .block_on(tokio::net::TcpListener::bind("127.0.0.1:0"))
        .unwrap();
    let addr = listener.local_addr().unwrap();
    let app = AppState {
        sessions: Arc::clone(&manager),
        token: token.map(str::to_string),
    };
    runtime.spawn(async move {
        let _ = axum::serve(listener, http::router(app)).await;
    });
    Server {
        base: format!("http://{addr}"),
        manager,
        _runtime: runtime,
    }
}

pub struct Client {
    agent: ureq::Agent,
    base: String,
    token: Option<String>,
}

impl Client {
    pub fn new(server: &Server) -> Self {
        Client::with_token(server, None)
    }

    pub fn with_token(server: &Server, token: Option<&str>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(10)))
            .build()
            .into();
        Client {
            agent,
            base: server.base.clone(),
            token: token.map(str::to_string),
        }
    }

    fn finish(resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> (u16, Value) {
        let mut resp = resp.expect("request reaches the server");
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().unwrap();
        let body = serde_json::from_str(&text).unwrap_or(Value::String(text));
        (status, body)
    }

    pub fn get(&self, path: &str) -> (u16, Value) {
        let mut req = self.agent.get(format!("{}{path}", self.base));
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        Client::finish(req.call())
    }

    pub fn post(&self, path: &str, body: &Value) -> (u16, Value) {
        let mut req = self.agent.post(format!("{}{path}", self.base));
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        Client::finish(req.send_json(body))
    }

    pub fn post_raw(&self, path: &str, body: &str) -> (u16, Value) {
        let req = self
            .agent
            .post(format!("{}{path}", self.base))
            .header("Content-Type", "application/json");
        Client::finish(req.send(body))
    }

    /// Polls the session until its state is `want`.
    pub fn wait_for(&self, id: &str, want: &str) -> Value {
        let deadline = Instant::now() + Duration::from_secs(5);
        loop {
            let (status, view) = self.get(&format!("/sessions/{id}"));
            assert_eq!(status, 200, "{view}");
            if view["state"] == want {
                return view;
            }
            assert!(Instant::now() < deadline, "timed out waiting for {want}; last view {view}");
            std::thread::sleep(Duration::from_millis(10));
        }
    }
}
