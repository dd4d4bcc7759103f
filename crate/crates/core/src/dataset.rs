//! Plain-text demonstration files.
//!
//! ```text
//! diffpolicy-demos 1
//! env corridor_precision
//! obs_dim 7
//! action_dim 2
//! horizon 4
//! max_steps 60
//! sparse_reward false
//! seed 42
//! trajectories 100
//! obs_mean <obs_dim floats>
//! obs_scale <obs_dim floats>
//! trajectory <index> <steps>
//! obs <obs_dim floats>
//! act <horizon * action_dim floats>
//! ...
//! end
//! ```
//!
//! Each trajectory block alternates `obs`/`act` lines, one pair per chunk.
//! Floats use the shortest representation that round-trips exactly.
//! Blank lines and lines starting with `#` are ignored.

use std::fmt::Write as _;
use std::path::Path;

use crate::envs::{DemoDataset, EnvKind, EnvSpec, ObsNormalizer, Trajectory};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "diffpolicy-demos";

fn floats(out: &mut String, key: &str, v: &[f64]) {
    out.push_str(key);
    for x in v {
        let _ = write!(out, " {x:?}");
    }
    out.push('\n');
}

pub fn to_text(d: &DemoDataset) -> String {
    let s = &d.spec;
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC} {FORMAT_VERSION}");
    let _ = writeln!(out, "env {}", s.kind);
    let _ = writeln!(out, "obs_dim {}", s.obs_dim);
    let _ = writeln!(out, "action_dim {}", s.action_dim);
    let _ = writeln!(out, "horizon {}", s.horizon);
    let _ = writeln!(out, "max_steps {}", s.max_steps);
    let _ = writeln!(out, "sparse_reward {}", s.sparse_reward);
    let _ = writeln!(out, "seed {}", d.seed);
    let _ = writeln!(out, "trajectories {}", d.trajectories.len());
    floats(&mut out, "obs_mean", &d.normalizer.mean);
    floats(&mut out, "obs_scale", &d.normalizer.scale);
    for (i, t) in d.trajectories.iter().enumerate() {
        let _ = writeln!(out, "trajectory {i} {}", t.obs.len());
        for (o, a) in t.obs.iter().zip(&t.actions) {
            floats(&mut out, "obs", o);
            floats(&mut out, "act", a);
        }
    }
    out.push_str("end\n");
    out
}

struct Lines<'a> {
    iter: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next_record(&mut self) -> Result<(usize, &'a str, Vec<&'a str>)> {
        for (n, line) in self.iter.by_ref() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or_default();
            return Ok((n + 1, key, parts.collect()));
        }
        Err(Error::Dataset("unexpected end of file".into()))
    }

    fn expect(&mut self, want: &str) -> Result<(usize, Vec<&'a str>)> {
        let (n, key, rest) = self.next_record()?;
        if key != want {
            return Err(Error::Dataset(format!("line {n}: expected `{want}`, found `{key}`")));
        }
        Ok((n, rest))
    }

    fn scalar<T: std::str::FromStr>(&mut self, want: &str) -> Result<T> {
        let (n, rest) = self.expect(want)?;
        match rest.as_slice() {
            [v] => v.parse().map_err(|_| Error::Dataset(format!("line {n}: bad value `{v}` for `{want}`"))),
            _ => Err(Error::Dataset(format!("line {n}: `{want}` takes one value"))),
        }
    }

    fn floats(&mut self, want: &str, len: usize) -> Result<Vec<f64>> {
        let (n, rest) = self.expect(want)?;
        if rest.len() != len {
            return Err(Error::Dataset(format!("line {n}: `{want}` has {} values, expected {len}", rest.len())));
        }
        rest.iter()
            .map(|v| match v.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x),
                _ => Err(Error::Dataset(format!("line {n}: bad number `{v}`"))),
            })
            .collect()
    }
}

pub fn from_text(text: &str) -> Result<DemoDataset> {
    let mut l = Lines { iter: text.lines().enumerate() };
    let (n, version) = l.expect(MAGIC)?;
    if version != [FORMAT_VERSION.to_string().as_str()] {
        return Err(Error::Dataset(format!("line {n}: unsupported format version {version:?}")));
    }
    let kind: EnvKind = l.scalar::<String>("env")?.parse()?;
    let obs_dim: usize = l.scalar("obs_dim")?;
    let action_dim: usize = l.scalar("action_dim")?;
    let horizon: usize = l.scalar("horizon")?;
    let max_steps: usize = l.scalar("max_steps")?;
    let sparse_reward: bool = l.scalar("sparse_reward")?;
    let mut spec = EnvSpec::new(kind, horizon)?;
    if spec.obs_dim != obs_dim || spec.action_dim != action_dim {
        return Err(Error::Dataset(format!("dimensions {obs_dim}/{action_dim} do not match environment {kind}")));
    }
    spec.max_steps = max_steps;
    spec.sparse_reward = sparse_reward;
    let seed: u64 = l.scalar("seed")?;
    let count: usize = l.scalar("trajectories")?;
    let mean = l.floats("obs_mean", obs_dim)?;
    let scale = l.floats("obs_scale", obs_dim)?;
    if scale.iter().any(|&s| s <= 0.0) {
        return Err(Error::Dataset("normalization scale must be positive".into()));
    }
    let mut trajectories = Vec::with_capacity(count);
    for i in 0..count {
        let (n, rest) = l.expect("trajectory")?;
        let steps: usize = match rest.as_slice() {
            [idx, steps] if idx.parse::<usize>().ok() == Some(i) => {
                steps.parse().map_err(|_| Error::Dataset(format!("line {n}: bad step count")))?
            }
            _ => return Err(Error::Dataset(format!("line {n}: expected `trajectory {i} <steps>`"))),
        };
        let mut t = Trajectory { obs: Vec::with_capacity(steps), actions: Vec::with_capacity(steps), success: true };
        for _ in 0..steps {
            t.obs.push(l.floats("obs", obs_dim)?);
            t.actions.push(l.floats("act", spec.chunk_dim())?);
        }
        trajectories.push(t);
    }
    l.expect("end")?;
    Ok(DemoDataset { spec, seed, normalizer: ObsNormalizer { mean, scale }, trajectories })
}

pub fn save(d: &DemoDataset, path: &Path) -> Result<()> {
    std::fs::write(path, to_text(d)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<DemoDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text)
}
