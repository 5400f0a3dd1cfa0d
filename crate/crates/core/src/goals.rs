//! Linguistic goals for expeditions: the goal log, prompt assembly and the
//! clients that turn a prompt into a goal.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::archive::{Archive, ArchiveError, SolutionRecord};
use crate::behavior::BehaviorImage;
use crate::embedding::Embedding;

pub const GOALS_FILE: &str = "goals.jsonl";
pub const DEFAULT_CONTEXT: usize = 25;
pub const WORDS_MIN: usize = 5;
pub const WORDS_MAX: usize = 15;

pub const VLM_URL_VAR: &str = "EE_VLM_URL";
pub const VLM_MODEL_VAR: &str = "EE_VLM_MODEL";
pub const VLM_KEY_VAR: &str = "EE_VLM_KEY";

/// Hand-crafted goals that open the goal log.
pub const DEFAULT_SEED_GOALS: [&str; 6] = [
    "a pink square",
    "a blue circle with a bright outline",
    "two green dots side by side",
    "a red ring surrounding a yellow core",
    "horizontal stripes of alternating colors",
    "a white star with five points",
];

/// Used when the VLM is unavailable or returns nothing usable.
pub const DEFAULT_FALLBACK_SCRIPT: [&str; 8] = [
    "a photo of a jellyfish with trailing tentacles",
    "a green hexagonal grid with a red spiral at the center",
    "a cluster of small blue cells dividing in two",
    "a photo of a butterfly with red wings and green dot patterns",
    "a thin red line snaking across a dark background",
    "a photo of a sea urchin with green spines radiating outward",
    "concentric rings of red green and blue light",
    "a photo of a four-leaf clover with bright green leaves",
];

#[derive(Debug, Error)]
pub enum GoalError {
    #[error("goal service unavailable after {attempts} attempts: {message}")]
    Unavailable { attempts: usize, message: String },
    #[error("goal service response: {0}")]
    Malformed(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("{file} line {line}: {message}")]
    Corrupt { file: &'static str, line: usize, message: String },
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error(transparent)]
    Image(#[from] crate::behavior::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GoalSource {
    Predefined,
    Vlm,
    Scripted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoalRecord {
    pub goal_id: usize,
    pub text: String,
    pub embedding: Embedding,
    pub iteration: usize,
    pub context_ids: Vec<usize>,
    pub source: GoalSource,
    /// Nearest archived solution the expedition started from.
    pub seed_solution: Option<usize>,
    /// Whether the text has 5 to 15 words; a soft constraint.
    pub word_count_ok: bool,
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

pub fn word_count_ok(text: &str) -> bool {
    (WORDS_MIN..=WORDS_MAX).contains(&word_count(text))
}

/// Checks a configured seed-goal list: exactly six nonempty goals of at most
/// 15 words. Hand-crafted goals may be shorter than 5 words.
pub fn validate_seed_goals(goals: &[String]) -> Result<(), GoalError> {
    if goals.len() != DEFAULT_SEED_GOALS.len() {
        return Err(GoalError::Config(format!("expected 6 seed goals, got {}", goals.len())));
    }
    for g in goals {
        let n = word_count(g);
        if n == 0 || n > WORDS_MAX {
            return Err(GoalError::Config(format!("seed goal {g:?} has {n} words")));
        }
    }
    Ok(())
}

pub fn default_seed_goals() -> Vec<String> {
    DEFAULT_SEED_GOALS.iter().map(|s| s.to_string()).collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GoalLine {
    goal_id: usize,
    text: String,
    embedding: Vec<f64>,
    iteration: usize,
    context_ids: Vec<usize>,
    source: GoalSource,
    seed_solution: Option<usize>,
    word_count_ok: bool,
}

/// Append-only goal log with dense ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GoalLog {
    goals: Vec<GoalRecord>,
}

impl GoalLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.goals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.goals.is_empty()
    }

    pub fn goals(&self) -> &[GoalRecord] {
        &self.goals
    }

    pub fn get(&self, id: usize) -> Option<&GoalRecord> {
        self.goals.get(id)
    }

    pub fn texts(&self) -> Vec<&str> {
        self.goals.iter().map(|g| g.text.as_str()).collect()
    }

    pub fn contains_text(&self, text: &str) -> bool {
        let key = normalize(text);
        self.goals.iter().any(|g| normalize(&g.text) == key)
    }

    pub fn append(
        &mut self,
        text: String,
        embedding: Embedding,
        iteration: usize,
        context_ids: Vec<usize>,
        source: GoalSource,
        seed_solution: Option<usize>,
    ) -> usize {
        let goal_id = self.goals.len();
        let word_count_ok = word_count_ok(&text);
        self.goals.push(GoalRecord {
            goal_id,
            text,
            embedding,
            iteration,
            context_ids,
            source,
            seed_solution,
            word_count_ok,
        });
        goal_id
    }

    pub fn set_seed_solution(&mut self, goal_id: usize, solution: usize) {
        if let Some(g) = self.goals.get_mut(goal_id) {
            g.seed_solution = Some(solution);
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), GoalError> {
        let tmp = path.with_extension("jsonl.tmp");
        {
            let mut out = BufWriter::new(std::fs::File::create(&tmp)?);
            for g in &self.goals {
                let line = GoalLine {
                    goal_id: g.goal_id,
                    text: g.text.clone(),
                    embedding: g.embedding.vector().to_vec(),
                    iteration: g.iteration,
                    context_ids: g.context_ids.clone(),
                    source: g.source,
                    seed_solution: g.seed_solution,
                    word_count_ok: g.word_count_ok,
                };
                serde_json::to_writer(&mut out, &line)?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path, backend_id: &str) -> Result<Self, GoalError> {
        let mut log = Self::new();
        if !path.exists() {
            return Ok(log);
        }
        let reader = BufReader::new(std::fs::File::open(path)?);
        for (i, line) in reader.lines().enumerate() {
            let corrupt = |message: String| GoalError::Corrupt { file: GOALS_FILE, line: i + 1, message };
            let parsed: GoalLine = serde_json::from_str(&line?).map_err(|e| corrupt(e.to_string()))?;
            if parsed.goal_id != i {
                return Err(corrupt(format!("expected goal id {i}, found {}", parsed.goal_id)));
            }
            let embedding =
                Embedding::from_unit(backend_id, parsed.embedding).map_err(|e| corrupt(e.to_string()))?;
            log.goals.push(GoalRecord {
                goal_id: parsed.goal_id,
                text: parsed.text,
                embedding,
                iteration: parsed.iteration,
                context_ids: parsed.context_ids,
                source: parsed.source,
                seed_solution: parsed.seed_solution,
                word_count_ok: parsed.word_count_ok,
            });
        }
        Ok(log)
    }
}

fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

pub const SYSTEM_PROMPT: &str = "You are guiding the exploration of a continuous cellular automaton \
(Flow Lenia). Each image shows the final state of one simulation. Your job is to propose the next \
goal for a search that tries to discover patterns nobody has seen yet.";

pub const INSTRUCTIONS: &str = "Step 1: describe the characteristics that are shared across the \
sampled images and those that are unique to only a few of them.\n\
Step 2: consider the adjacent possible, meaning patterns that are not in the archive yet but look \
plausible starting from what you see.\n\
Step 3: generate a 5-15 words goal description for the next expedition. It must differ from every \
previous goal. Write the goal alone on the last line of your answer.";

#[derive(Debug, Clone, PartialEq)]
pub struct ContextImage {
    pub id: usize,
    pub novelty: f64,
    pub image: Option<BehaviorImage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoalPrompt {
    pub system: String,
    pub prior_goals: Vec<String>,
    pub context: Vec<ContextImage>,
    pub instructions: String,
}

impl GoalPrompt {
    pub fn context_ids(&self) -> Vec<usize> {
        self.context.iter().map(|c| c.id).collect()
    }

    /// The text part of the user message.
    pub fn user_text(&self) -> String {
        let mut s = String::from("Goals pursued so far:\n");
        for g in &self.prior_goals {
            s.push_str("- ");
            s.push_str(g);
            s.push('\n');
        }
        s.push_str(&format!(
            "\nThe {} images that follow were sampled from the archive in proportion to their novelty. \
             Their novelty scores, in order: ",
            self.context.len()
        ));
        let scores: Vec<String> = self.context.iter().map(|c| format!("{:.3}", c.novelty)).collect();
        s.push_str(&scores.join(", "));
        s.push_str("\n\n");
        s.push_str(&self.instructions);
        s
    }
}

/// Samples `n` archived behaviors with probability proportional to
/// `NOV^alpha` and assembles the prompt around them. `load_image` supplies
/// the image of a sampled record; a `None` leaves the slot image-less.
pub fn build_prompt(
    archive: &Archive,
    log: &GoalLog,
    n: usize,
    alpha: f64,
    seed: u64,
    load_image: impl Fn(&SolutionRecord) -> Option<BehaviorImage>,
) -> Result<GoalPrompt, GoalError> {
    let ids = archive.sample_high_novelty(n, alpha, seed)?;
    let scores = archive.novelty_scores();
    let context = ids
        .into_iter()
        .map(|id| ContextImage {
            id,
            novelty: scores[id],
            image: load_image(&archive.records()[id]),
        })
        .collect();
    Ok(GoalPrompt {
        system: SYSTEM_PROMPT.to_string(),
        prior_goals: log.texts().into_iter().map(String::from).collect(),
        context,
        instructions: INSTRUCTIONS.to_string(),
    })
}

pub trait GoalClient: Send + Sync {
    fn source(&self) -> GoalSource;

    /// Raw model response for a prompt.
    fn respond(&self, prompt: &GoalPrompt) -> Result<String, GoalError>;

    /// Position in a deterministic script, saved with checkpoints.
    fn cursor(&self) -> usize {
        0
    }

    fn set_cursor(&self, _cursor: usize) {}
}

/// Returns script entries in order, cycling.
#[derive(Debug)]
pub struct ScriptedGoals {
    script: Vec<String>,
    cursor: AtomicUsize,
}

impl ScriptedGoals {
    pub fn new(script: Vec<String>) -> Result<Self, GoalError> {
        if script.is_empty() || script.iter().any(|s| s.trim().is_empty()) {
            return Err(GoalError::Config("goal script must be nonempty with nonempty entries".into()));
        }
        Ok(Self { script, cursor: AtomicUsize::new(0) })
    }

    pub fn fallback() -> Self {
        Self::new(DEFAULT_FALLBACK_SCRIPT.iter().map(|s| s.to_string()).collect()).expect("nonempty")
    }

    pub fn next_goal(&self) -> String {
        let i = self.cursor.fetch_add(1, Ordering::SeqCst);
        self.script[i % self.script.len()].clone()
    }
}

impl GoalClient for ScriptedGoals {
    fn source(&self) -> GoalSource {
        GoalSource::Scripted
    }

    fn respond(&self, _prompt: &GoalPrompt) -> Result<String, GoalError> {
        Ok(self.next_goal())
    }

    /// Number of goals handed out so far.
    fn cursor(&self) -> usize {
        self.cursor.load(Ordering::SeqCst)
    }

    fn set_cursor(&self, cursor: usize) {
        self.cursor.store(cursor, Ordering::SeqCst);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VlmConfig {
    /// Base URL of a chat-completions API, e.g. `https://api.openai.com/v1`.
    pub url: String,
    pub model: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub attempts: usize,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for VlmConfig {
    fn default() -> Self {
        Self {
            url: String::new(),
            model: "o4-mini".into(),
            api_key: None,
            attempts: 3,
            backoff_ms: 1000,
            timeout_secs: 300,
        }
    }
}

impl VlmConfig {
    /// Fills empty fields from `EE_VLM_URL`, `EE_VLM_MODEL` and `EE_VLM_KEY`.
    pub fn with_env(mut self) -> Self {
        if self.url.is_empty() {
            if let Ok(v) = std::env::var(VLM_URL_VAR) {
                self.url = v;
            }
        }
        if let Ok(v) = std::env::var(VLM_MODEL_VAR) {
            if !v.is_empty() {
                self.model = v;
            }
        }
        if self.api_key.is_none() {
            self.api_key = std::env::var(VLM_KEY_VAR).ok().filter(|k| !k.is_empty());
        }
        self
    }
}

/// Client for an OpenAI-style chat-completions endpoint.
///
/// Request: `POST {url}/chat/completions` with
/// `{"model", "messages": [{"role": "system", "content": <text>},
/// {"role": "user", "content": [{"type": "text", "text"}, {"type": "image_url",
/// "image_url": {"url": "data:image/png;base64,..."}}, ...]}]}`.
/// Response: `choices[0].message.content` as a string.
pub struct VlmClient {
    config: VlmConfig,
    agent: ureq::Agent,
}

impl std::fmt::Debug for VlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VlmClient")
            .field("url", &self.config.url)
            .field("model", &self.config.model)
            .finish()
    }
}

impl VlmClient {
    pub fn new(config: VlmConfig) -> Result<Self, GoalError> {
        if config.url.is_empty() {
            return Err(GoalError::Config(format!("no VLM url (set {VLM_URL_VAR})")));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self { config, agent })
    }

    pub fn request_body(&self, prompt: &GoalPrompt) -> Result<serde_json::Value, GoalError> {
        let mut content = vec![json!({"type": "text", "text": prompt.user_text()})];
        for c in &prompt.context {
            if let Some(img) = &c.image {
                let b64 = base64::engine::general_purpose::STANDARD.encode(img.to_png()?);
                content.push(json!({
                    "type": "image_url",
                    "image_url": {"url": format!("data:image/png;base64,{b64}")}
                }));
            }
        }
        Ok(json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": prompt.system},
                {"role": "user", "content": content},
            ],
        }))
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<String, (bool, String)> {
        let url = format!("{}/chat/completions", self.config.url.trim_end_matches('/'));
        let mut req = self.agent.post(&url);
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let resp = req.send_json(body).map_err(|e| (true, e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.into_body().read_to_string().map_err(|e| (true, e.to_string()))?;
        if !(200..300).contains(&status) {
            let retry = status == 429 || status >= 500;
            return Err((retry, format!("status {status}: {text}")));
        }
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| (false, e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(String::from)
            .ok_or_else(|| (false, "missing choices[0].message.content".into()))
    }
}

impl GoalClient for VlmClient {
    fn source(&self) -> GoalSource {
        GoalSource::Vlm
    }

    fn respond(&self, prompt: &GoalPrompt) -> Result<String, GoalError> {
        let body = self.request_body(prompt)?;
        let attempts = self.config.attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let wait = self.config.backoff_ms.saturating_mul(1 << (attempt - 1));
                std::thread::sleep(Duration::from_millis(wait));
            }
            match self.attempt(&body) {
                Ok(content) => return Ok(content),
                Err((false, msg)) => return Err(GoalError::Malformed(msg)),
                Err((true, msg)) => {
                    log::warn!("VLM request failed (attempt {}/{attempts}): {msg}", attempt + 1);
                    last = msg;
                }
            }
        }
        Err(GoalError::Unavailable { attempts, message: last })
    }
}

/// The goal in a model response: its last nonempty line, without list
/// markers, a `Goal:` label or surrounding quotes.
pub fn extract_goal(response: &str) -> Option<String> {
    let line = response.lines().map(str::trim).rfind(|l| !l.is_empty())?;
    let mut s = line.trim_start_matches(['-', '*', '#', '>', ' ']).trim();
    for label in ["goal:", "goal description:", "final goal:"] {
        if s.len() >= label.len() && s[..label.len()].eq_ignore_ascii_case(label) {
            s = s[label.len()..].trim();
        }
    }
    let s = s.trim_matches(|c: char| c == '"' || c == '\'' || c == '*' || c == '`').trim();
    (!s.is_empty()).then(|| s.to_string())
}

/// Asks `client` for a goal, falling back to `fallback` when it fails or
/// returns nothing usable. A duplicate of a logged goal is regenerated once
/// and then accepted with a warning.
pub fn generate_goal(
    prompt: &GoalPrompt,
    client: &dyn GoalClient,
    fallback: &ScriptedGoals,
    log: &GoalLog,
) -> (String, GoalSource) {
    let ask = || match client.respond(prompt) {
        Ok(response) => match extract_goal(&response) {
            Some(goal) => (goal, client.source()),
            None => {
                log::warn!("empty goal response; using fallback generator");
                (fallback.next_goal(), GoalSource::Scripted)
            }
        },
        Err(e) => {
            log::warn!("goal generation failed: {e}; using fallback generator");
            (fallback.next_goal(), GoalSource::Scripted)
        }
    };
    let first = ask();
    if !log.contains_text(&first.0) {
        return first;
    }
    log::info!("goal {:?} was already pursued; regenerating once", first.0);
    let second = ask();
    if log.contains_text(&second.0) {
        log::warn!("accepting duplicate goal {:?}", second.0);
    }
    second
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb() -> Embedding {
        Embedding::normalized("t", vec![1.0, 0.0]).unwrap()
    }

    fn prompt() -> GoalPrompt {
        GoalPrompt {
            system: SYSTEM_PROMPT.into(),
            prior_goals: vec!["a pink square".into()],
            context: vec![ContextImage { id: 3, novelty: 0.25, image: Some(BehaviorImage::black()) }],
            instructions: INSTRUCTIONS.into(),
        }
    }

    #[test]
    fn default_seed_goals_are_valid() {
        let goals = default_seed_goals();
        assert_eq!(goals.len(), 6);
        assert_eq!(goals[0], "a pink square");
        validate_seed_goals(&goals).unwrap();
        assert!(validate_seed_goals(&goals[..5]).is_err());
    }

    #[test]
    fn scripted_goals_cycle() {
        let s = ScriptedGoals::new(vec!["a".into(), "b".into(), "c".into()]).unwrap();
        let got: Vec<String> = (0..5).map(|_| s.respond(&prompt()).unwrap()).collect();
        assert_eq!(got, ["a", "b", "c", "a", "b"]);
        let one = ScriptedGoals::new(vec!["a blue ring".into()]).unwrap();
        assert!((0..3).all(|_| one.next_goal() == "a blue ring"));
        assert!(ScriptedGoals::new(vec![]).is_err());
    }

    #[test]
    fn extraction_takes_the_last_nonempty_line() {
        let r = "Shared: blobs.\nUnique: rings.\n\nGoal: \"a photo of a jellyfish with trailing tentacles\"\n  \n";
        assert_eq!(extract_goal(r).unwrap(), "a photo of a jellyfish with trailing tentacles");
        assert_eq!(extract_goal("- **a red spiral with five arms**").unwrap(), "a red spiral with five arms");
        assert_eq!(extract_goal(" \n \n"), None);
    }

    #[test]
    fn word_count_is_a_soft_flag() {
        let mut log = GoalLog::new();
        let a = log.append("a pink square".into(), emb(), 0, vec![], GoalSource::Predefined, None);
        let b = log.append("a photo of a jellyfish with trailing tentacles".into(), emb(), 5, vec![1], GoalSource::Vlm, None);
        assert_eq!((a, b), (0, 1));
        assert!(!log.get(0).unwrap().word_count_ok);
        assert!(log.get(1).unwrap().word_count_ok);
    }

    struct Failing;
    impl GoalClient for Failing {
        fn source(&self) -> GoalSource {
            GoalSource::Vlm
        }
        fn respond(&self, _: &GoalPrompt) -> Result<String, GoalError> {
            Err(GoalError::Unavailable { attempts: 3, message: "down".into() })
        }
    }

    #[test]
    fn failures_fall_back_to_the_script() {
        let fallback = ScriptedGoals::new(vec!["a green ring with a red core".into()]).unwrap();
        let (text, source) = generate_goal(&prompt(), &Failing, &fallback, &GoalLog::new());
        assert_eq!(text, "a green ring with a red core");
        assert_eq!(source, GoalSource::Scripted);
    }

    #[test]
    fn duplicates_are_regenerated_once() {
        let mut log = GoalLog::new();
        log.append("A  Pink square".into(), emb(), 0, vec![], GoalSource::Predefined, None);
        let client = ScriptedGoals::new(vec!["a pink square".into(), "a blue ring".into()]).unwrap();
        let fallback = ScriptedGoals::fallback();
        assert_eq!(generate_goal(&prompt(), &client, &fallback, &log).0, "a blue ring");
        let stuck = ScriptedGoals::new(vec!["a pink square".into()]).unwrap();
        assert_eq!(generate_goal(&prompt(), &stuck, &fallback, &log).0, "a pink square");
        assert_eq!(stuck.cursor(), 2);
    }

    #[test]
    fn request_body_carries_images_as_data_urls() {
        let client = VlmClient::new(VlmConfig { url: "http://x".into(), ..VlmConfig::default() }).unwrap();
        let body = client.request_body(&prompt()).unwrap();
        let content = body["messages"][1]["content"].as_array().unwrap();
        assert_eq!(content.len(), 2);
        let url = content[1]["image_url"]["url"].as_str().unwrap();
        assert!(url.starts_with("data:image/png;base64,"));
        assert!(content[0]["text"].as_str().unwrap().contains("5-15 words goal description"));
        assert!(content[0]["text"].as_str().unwrap().contains("- a pink square"));
    }

    #[test]
    fn api_key_is_never_serialized() {
        let c = VlmConfig { api_key: Some("secret".into()), ..VlmConfig::default() };
        assert!(!serde_json::to_string(&c).unwrap().contains("secret"));
    }

    #[test]
    fn log_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(GOALS_FILE);
        let mut log = GoalLog::new();
        log.append("a pink square".into(), emb(), 0, vec![], GoalSource::Predefined, None);
        log.append("a blue ring on black".into(), emb(), 1050, vec![4, 2], GoalSource::Scripted, Some(7));
        log.save(&path).unwrap();
        assert_eq!(GoalLog::load(&path, "t").unwrap(), log);
    }
}
