//! Session store.
//!
//! A session is `(input bytes, pipeline config, review log)`; its report is
//! derived state. With a data directory each session lives in
//! `<dir>/<id>/{input.bin, config.json, log.jsonl}` and is rebuilt by
//! re-running the pipeline and replaying the log.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use fishgrade_core::image::{decode_image, ChannelMap, MultiChannelImage};
use fishgrade_core::pipeline::{run_pipeline_with_progress, PipelineConfig};
use fishgrade_core::report::{ReviewChange, ReviewEvent, SlideReport};
use sha2::{Digest, Sha256};
use tokio::sync::Mutex;

use crate::error::ApiError;

pub enum State {
    Processing,
    Ready(Box<SlideReport>),
    Failed(String),
}

pub struct Session {
    pub id: String,
    pub image: Arc<MultiChannelImage>,
    progress: AtomicU64,
    /// Held for the whole of every mutation, so events apply one at a time.
    state: Mutex<State>,
    dir: Option<PathBuf>,
}

/// Snapshot of a session for readers.
pub enum View {
    Processing(f64),
    Ready(Box<SlideReport>),
    Failed(String),
}

impl Session {
    pub fn progress(&self) -> f64 {
        f64::from_bits(self.progress.load(Ordering::Relaxed))
    }

    pub async fn view(&self) -> View {
        match &*self.state.lock().await {
            State::Processing => View::Processing(self.progress()),
            State::Ready(r) => View::Ready(r.clone()),
            State::Failed(e) => View::Failed(e.clone()),
        }
    }

    /// Applies a review change and returns the updated report.
    pub async fn apply(&self, actor: &str, change: ReviewChange) -> Result<SlideReport, ApiError> {
        let mut state = self.state.lock().await;
        let State::Ready(report) = &mut *state else {
            return Err(ApiError::Conflict(format!("session {} is not ready", self.id)));
        };
        // apply to a copy so a rejected or unpersisted event leaves no trace
        let mut next = report.clone();
        let event = next.apply(actor, change)?.clone();
        if let Some(dir) = &self.dir {
            append_event(dir, &event).map_err(|e| ApiError::Internal(format!("persisting review event: {e}")))?;
        }
        *report = next;
        Ok((**report).clone())
    }

    fn run(self: Arc<Self>, config: PipelineConfig, log: Vec<ReviewEvent>) {
        tokio::task::spawn_blocking(move || {
            let result = run_pipeline_with_progress(&self.image, &config, None, &|p| {
                self.progress.store(p.to_bits(), Ordering::Relaxed);
            })
            .and_then(|mut report| {
                for e in log {
                    report.apply_event(e)?;
                }
                Ok(report)
            });
            let next = match result {
                Ok(r) => State::Ready(Box::new(r)),
                Err(e) => {
                    tracing::warn!(session = %self.id, error = %e, "pipeline failed");
                    State::Failed(e.to_string())
                }
            };
            *self.state.blocking_lock() = next;
        });
    }
}

fn append_event(dir: &Path, event: &ReviewEvent) -> std::io::Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(dir.join("log.jsonl"))?;
    let line = serde_json::to_string(event).map_err(std::io::Error::other)?;
    writeln!(f, "{line}")?;
    f.sync_data()
}

pub fn content_id(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub struct Store {
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    data_dir: Option<PathBuf>,
}

impl Store {
    pub fn new(data_dir: Option<PathBuf>) -> Self {
        Self { sessions: RwLock::new(HashMap::new()), data_dir }
    }

    /// Reloads every persisted session; pipelines restart in the background.
    pub fn open(data_dir: PathBuf) -> std::io::Result<Self> {
        std::fs::create_dir_all(&data_dir)?;
        let store = Self::new(Some(data_dir.clone()));
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(&data_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("input.bin").is_file())
            .collect();
        dirs.sort();
        for dir in dirs {
            if let Err(e) = store.restore(&dir) {
                tracing::warn!(dir = %dir.display(), error = %e, "skipping unreadable session");
            }
        }
        Ok(store)
    }

    fn restore(&self, dir: &Path) -> Result<(), Box<dyn std::error::Error>> {
        let bytes = std::fs::read(dir.join("input.bin"))?;
        let config: PipelineConfig = serde_json::from_str(&std::fs::read_to_string(dir.join("config.json"))?)?;
        let log: Vec<ReviewEvent> = match std::fs::read_to_string(dir.join("log.jsonl")) {
            Ok(text) => text.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<Result<_, _>>()?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e.into()),
        };
        let image = decode_image(&bytes, ChannelMap::default())?;
        let id = content_id(&bytes);
        let (session, new) = self.insert(id, image, Some(dir.to_path_buf()));
        if new {
            session.run(config, log);
        }
        Ok(())
    }

    /// Inserts a Processing session unless `id` is already present.
    fn insert(&self, id: String, image: MultiChannelImage, dir: Option<PathBuf>) -> (Arc<Session>, bool) {
        let mut map = self.sessions.write().expect("session map poisoned");
        if let Some(s) = map.get(&id) {
            return (s.clone(), false);
        }
        let s = Arc::new(Session {
            id: id.clone(),
            image: Arc::new(image),
            progress: AtomicU64::new(0f64.to_bits()),
            state: Mutex::new(State::Processing),
            dir,
        });
        map.insert(id, s.clone());
        (s, true)
    }

    pub fn get(&self, id: &str) -> Option<Arc<Session>> {
        self.sessions.read().expect("session map poisoned").get(id).cloned()
    }

    /// Creates a session, or returns the existing one for identical bytes.
    /// The flag is true for a new session.
    pub fn create(&self, bytes: &[u8], config: PipelineConfig) -> Result<(Arc<Session>, bool), ApiError> {
        let id = content_id(bytes);
        if let Some(s) = self.get(&id) {
            return Ok((s, false));
        }
        config.validate().map_err(|e| ApiError::BadRequest(e.to_string()))?;
        let image = decode_image(bytes, ChannelMap::default()).map_err(|e| ApiError::BadRequest(format!("undecodable image: {e}")))?;
        let dir = match &self.data_dir {
            Some(root) => {
                let dir = root.join(&id);
                persist_new(&dir, bytes, &config).map_err(|e| ApiError::Internal(format!("persisting session: {e}")))?;
                Some(dir)
            }
            None => None,
        };
        // a concurrent upload of the same bytes may have won the race
        let (s, new) = self.insert(id, image, dir);
        if !new {
            return Ok((s, false));
        }
        s.clone().run(config, Vec::new());
        Ok((s, true))
    }
}

fn persist_new(dir: &Path, bytes: &[u8], config: &PipelineConfig) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.json"), serde_json::to_vec_pretty(config).map_err(std::io::Error::other)?)?;
    // input last: its presence marks a complete session directory
    std::fs::write(dir.join("input.bin"), bytes)
}
