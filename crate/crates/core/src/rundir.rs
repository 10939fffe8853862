//! On-disk run directories.
//!
//! ```text
//! state/theta.bin  state/basis_merged.bin  state/basis_<i>.bin
//! state/fisher_remain.bin  state/fisher_f<i>.bin  state/mask_<i>.idx
//! state/remain.bin  state/run.json
//! reports/request_<i>.json
//! incoming/        forget data of the request in flight, removed after it
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::container::{
    load_basis, load_fisher, load_mask, load_model, load_utterances, save_basis, save_fisher, save_mask, save_model,
    save_utterances,
};
use crate::error::{CortisError, Result};
use crate::evalkit::EvalReport;
use crate::fisher::RemainFisherCache;
use crate::subspace::BasisLabel;
use crate::toytts::SpeakerId;
use crate::unlearn::{AuditReport, RemainData, RequestLog, RunState, UnlearnRequest};

pub const STATE: &str = "state";
pub const REPORTS: &str = "reports";
pub const INCOMING: &str = "incoming";
const RETAINED_FORGET: &str = "retained_forget.bin";

/// Everything in `state/run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub requests: Vec<Vec<SpeakerId>>,
    pub eval_speakers: Vec<SpeakerId>,
    pub log: Vec<RequestLog>,
}

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CortisError + '_ {
    move |e| CortisError::io(path, e)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    fs::write(path, text).map_err(io(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    serde_json::from_str(&text).map_err(|e| CortisError::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

impl RunDir {
    /// Creates an empty run directory. An existing non-empty directory is
    /// refused unless `force`, in which case it is cleared.
    pub fn create(root: &Path, force: bool) -> Result<Self> {
        if root.exists() && fs::read_dir(root).map_err(io(root))?.next().is_some() {
            if !force {
                return Err(CortisError::Precondition(format!(
                    "{} already exists; pass --force to overwrite",
                    root.display()
                )));
            }
            fs::remove_dir_all(root).map_err(io(root))?;
        }
        for sub in [STATE, REPORTS] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(io(&p))?;
        }
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn open(root: &Path) -> Result<Self> {
        let state = root.join(STATE);
        if !state.is_dir() {
            return Err(CortisError::Precondition(format!("{} is not a run directory", root.display())));
        }
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn state_path(&self, name: &str) -> PathBuf {
        self.root.join(STATE).join(name)
    }

    fn staged_path(&self, index: usize) -> PathBuf {
        self.root.join(INCOMING).join(format!("request_{index}.bin"))
    }

    /// Writes the request's forget data under `incoming/`.
    pub fn stage(&self, request: &UnlearnRequest) -> Result<PathBuf> {
        let dir = self.root.join(INCOMING);
        fs::create_dir_all(&dir).map_err(io(&dir))?;
        let path = self.staged_path(request.index);
        save_utterances(request.data()?, &path)?;
        Ok(path)
    }

    /// Reads staged forget data back into a request.
    pub fn take_staged(&self, index: usize, speakers: Vec<SpeakerId>) -> Result<UnlearnRequest> {
        UnlearnRequest::new(index, speakers, load_utterances(&self.staged_path(index))?)
    }

    pub fn clear_incoming(&self) -> Result<()> {
        let dir = self.root.join(INCOMING);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(io(&dir))?;
        }
        Ok(())
    }

    pub fn save_state(&self, state: &RunState) -> Result<()> {
        let d = state.theta.num_params();
        save_model(&state.theta, &self.state_path("theta.bin"))?;
        save_basis(&state.merged_basis, d, &self.state_path("basis_merged.bin"))?;
        for b in &state.request_bases {
            if let BasisLabel::Request(i) = b.label {
                save_basis(b, d, &self.state_path(&format!("basis_{i}.bin")))?;
            }
        }
        if let Some(f) = state.remain_fisher.get() {
            save_fisher(f, &self.state_path("fisher_remain.bin"))?;
        }
        for (k, f) in state.prior_forget_fishers.iter().enumerate() {
            save_fisher(f, &self.state_path(&format!("fisher_f{}.bin", k + 1)))?;
        }
        for m in &state.masks {
            save_mask(m, &self.state_path(&format!("mask_{}.idx", m.request_index)))?;
        }
        save_utterances(&state.remain.train, &self.state_path("remain.bin"))?;
        if !state.retained_forget.is_empty() {
            save_utterances(&state.retained_forget, &self.state_path(RETAINED_FORGET))?;
        }
        write_json(
            &RunManifest {
                requests: state.requests.clone(),
                eval_speakers: state.remain.eval_speakers.clone(),
                log: state.log.clone(),
            },
            &self.state_path("run.json"),
        )
    }

    pub fn load_state(&self) -> Result<RunState> {
        let manifest: RunManifest = read_json(&self.state_path("run.json"))?;
        let remain = RemainData {
            train: load_utterances(&self.state_path("remain.bin"))?,
            eval_speakers: manifest.eval_speakers.clone(),
        };
        let mut state = RunState::new(load_model(&self.state_path("theta.bin"))?, remain);
        let fisher_remain = self.state_path("fisher_remain.bin");
        if fisher_remain.exists() {
            state.remain_fisher = RemainFisherCache::from_fisher(load_fisher(&fisher_remain)?);
        }
        state.merged_basis = load_basis(&self.state_path("basis_merged.bin"))?;
        for i in 1..=manifest.requests.len() {
            let basis = self.state_path(&format!("basis_{i}.bin"));
            if basis.exists() {
                state.request_bases.push(load_basis(&basis)?);
            }
            let fisher = self.state_path(&format!("fisher_f{i}.bin"));
            if fisher.exists() {
                state.prior_forget_fishers.push(load_fisher(&fisher)?);
            }
            let mask = self.state_path(&format!("mask_{i}.idx"));
            if mask.exists() {
                state.masks.push(load_mask(&mask)?);
            }
        }
        let retained = self.state_path(RETAINED_FORGET);
        if retained.exists() {
            state.retained_forget = load_utterances(&retained)?;
        }
        state.requests = manifest.requests;
        state.log = manifest.log;
        Ok(state)
    }

    pub fn save_report(&self, report: &EvalReport) -> Result<PathBuf> {
        let path = self.root.join(REPORTS).join(format!("request_{}.json", report.request_index));
        write_json(report, &path)?;
        Ok(path)
    }

    /// Reports in request order.
    pub fn reports(&self) -> Result<Vec<EvalReport>> {
        let dir = self.root.join(REPORTS);
        let mut indexed = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io(&dir))? {
            let path = entry.map_err(io(&dir))?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if numbered(name, "request_", ".json").is_some() {
                let report: EvalReport = read_json(&path)?;
                indexed.push((report.request_index, report));
            }
        }
        indexed.sort_by_key(|(i, _)| *i);
        Ok(indexed.into_iter().map(|(_, r)| r).collect())
    }
}

/// `Some(i)` when `name` is `prefix<i>suffix`.
fn numbered(name: &str, prefix: &str, suffix: &str) -> Option<usize> {
    name.strip_prefix(prefix)?.strip_suffix(suffix)?.parse().ok()
}

fn allowed_state_file(name: &str) -> bool {
    matches!(name, "theta.bin" | "basis_merged.bin" | "fisher_remain.bin" | "remain.bin" | "run.json")
        || numbered(name, "basis_", ".bin").is_some()
        || numbered(name, "fisher_f", ".bin").is_some()
        || numbered(name, "mask_", ".idx").is_some()
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(io(dir))? {
        let path = entry.map_err(io(dir))?.path();
        if path.is_dir() {
            walk(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// Enumerates every file in a run directory. Only θ, masks, Fisher
/// diagonals, bases, remain data, reports and the run manifest may exist;
/// anything else, including leftover forget data or extra checkpoints, is
/// reported by path.
pub fn audit_run_dir(root: &Path) -> Result<AuditReport> {
    let mut files = Vec::new();
    walk(root, &mut files)?;
    files.sort();
    let mut violations = Vec::new();
    for path in &files {
        let rel = path.strip_prefix(root).expect("walked from root");
        let parts: Vec<&str> = rel.iter().filter_map(|p| p.to_str()).collect();
        let ok = match parts.as_slice() {
            [STATE, name] => allowed_state_file(name),
            [REPORTS, name] => numbered(name, "request_", ".json").is_some() || *name == "audit.json",
            ["config.toml"] => true,
            _ => false,
        };
        if ok {
            continue;
        }
        let reason = match parts.as_slice() {
            [INCOMING, ..] => "forget data left in incoming/",
            [STATE, RETAINED_FORGET] => "forget utterances retained for retraining",
            _ => "artifact outside the permitted set",
        };
        violations.push(format!("{}: {reason}", path.display()));
    }

    let manifest = root.join(STATE).join("run.json");
    let remain = root.join(STATE).join("remain.bin");
    if manifest.exists() && remain.exists() {
        let m: RunManifest = read_json(&manifest)?;
        let forgotten: Vec<SpeakerId> = m.requests.iter().flatten().copied().collect();
        let leaked: std::collections::BTreeSet<_> = load_utterances(&remain)?
            .into_iter()
            .map(|u| u.speaker)
            .filter(|s| forgotten.contains(s))
            .collect();
        if !leaked.is_empty() {
            violations.push(format!("{}: holds utterances of forgotten speakers {leaked:?}", remain.display()));
        }
        if let Some(s) = m.eval_speakers.iter().find(|s| forgotten.contains(s)) {
            violations.push(format!("{}: forgotten speaker {s} listed for evaluation", manifest.display()));
        }
    }
    Ok(AuditReport {
        passed: violations.is_empty(),
        violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbered_names() {
        assert_eq!(numbered("mask_12.idx", "mask_", ".idx"), Some(12));
        assert_eq!(numbered("mask_x.idx", "mask_", ".idx"), None);
        assert!(allowed_state_file("fisher_f3.bin"));
        assert!(!allowed_state_file("theta_0.bin"));
    }

    #[test]
    fn create_refuses_existing_output() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("run");
        RunDir::create(&root, false).unwrap();
        fs::write(root.join("state").join("theta.bin"), b"x").unwrap();
        assert!(matches!(RunDir::create(&root, false), Err(CortisError::Precondition(_))));
        RunDir::create(&root, true).unwrap();
        assert!(!root.join("state").join("theta.bin").exists());
    }

    #[test]
    fn audit_names_offending_files() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::create(dir.path(), false).unwrap();
        fs::write(run.state_path("theta.bin"), b"").unwrap();
        assert!(audit_run_dir(dir.path()).unwrap().passed);
        fs::create_dir_all(dir.path().join("incoming")).unwrap();
        fs::write(dir.path().join("incoming").join("request_1.bin"), b"").unwrap();
        fs::write(run.state_path("theta_0.bin"), b"").unwrap();
        let report = audit_run_dir(dir.path()).unwrap();
        assert!(!report.passed);
        assert_eq!(report.violations.len(), 2);
        assert!(report.violations.iter().any(|v| v.contains("request_1.bin")));
        assert!(report.violations.iter().any(|v| v.contains("theta_0.bin")));
    }
}
