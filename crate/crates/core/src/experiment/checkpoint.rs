use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::meta::AdamState;
use crate::model::{next_line, ParamVector, PARAMS_MAGIC};

use super::config::TrainConfig;

const MAGIC: &str = "maltml-checkpoint v1";

/// Everything needed to evaluate or resume a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub params: ParamVector,
    pub adam: AdamState,
}

impl Checkpoint {
    /// Text layout:
    ///
    /// ```text
    /// maltml-checkpoint v1
    /// step <n>
    /// config_hash <hex>
    /// config <line count>
    /// <key = value lines>
    /// params
    /// <parameter block>
    /// adam_t <n>
    /// adam_m
    /// <parameter block>
    /// adam_v
    /// <parameter block>
    /// ```
    /// The output directory is not recorded, so identical runs written to
    /// different places produce identical checkpoints.
    pub fn to_text(&self) -> String {
        let cfg: String = self
            .config
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("output_dir"))
            .map(|l| format!("{l}\n"))
            .collect();
        let mut out = String::new();
        writeln!(out, "{MAGIC}").unwrap();
        writeln!(out, "step {}", self.step).unwrap();
        writeln!(out, "config_hash {}", self.config.hash()).unwrap();
        writeln!(out, "config {}", cfg.lines().count()).unwrap();
        out.push_str(&cfg);
        writeln!(out, "params").unwrap();
        out.push_str(&self.params.to_text());
        writeln!(out, "adam_t {}", self.adam.t).unwrap();
        writeln!(out, "adam_m").unwrap();
        out.push_str(&self.adam.first_moment.to_text());
        writeln!(out, "adam_v").unwrap();
        out.push_str(&self.adam.second_moment.to_text());
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        expect(&mut lines, MAGIC)?;
        let step = tagged(&mut lines, "step")?
            .parse()
            .map_err(|_| parse(0, "bad step"))?;
        let hash = tagged(&mut lines, "config_hash")?.to_string();
        let count: usize = tagged(&mut lines, "config")?
            .parse()
            .map_err(|_| parse(0, "bad config line count"))?;
        let mut cfg_text = String::new();
        for _ in 0..count {
            let (_, l) = next_line(&mut lines)?;
            cfg_text.push_str(l);
            cfg_text.push('\n');
        }
        let mut config = TrainConfig::from_text(&cfg_text)?;
        config.output_dir = PathBuf::new();
        if config.hash() != hash {
            return Err(Error::config(format!(
                "checkpoint config hash {hash} does not match its config ({})",
                config.hash()
            )));
        }
        expect(&mut lines, "params")?;
        let params = block(&mut lines)?;
        let t = tagged(&mut lines, "adam_t")?
            .parse()
            .map_err(|_| parse(0, "bad adam_t"))?;
        expect(&mut lines, "adam_m")?;
        let first_moment = block(&mut lines)?;
        expect(&mut lines, "adam_v")?;
        let second_moment = block(&mut lines)?;
        if let Some((n, l)) = lines.find(|(_, l)| !l.is_empty()) {
            return Err(parse(n, &format!("trailing content {l:?}")));
        }
        if !(params.same_layout(&first_moment) && params.same_layout(&second_moment)) {
            return Err(Error::LayoutMismatch);
        }
        if params.layout().as_ref() != &config.model_spec().layout() {
            return Err(Error::config(
                "checkpoint parameters do not match its model config",
            ));
        }
        Ok(Self {
            config,
            step,
            params,
            adam: AdamState {
                first_moment,
                second_moment,
                t,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn parse(line: usize, msg: &str) -> Error {
    Error::Parse {
        line,
        msg: msg.to_string(),
    }
}

fn expect<'a>(lines: &mut impl Iterator<Item = (usize, &'a str)>, want: &str) -> Result<()> {
    let (n, l) = next_line(lines)?;
    if l != want {
        return Err(parse(n, &format!("expected {want:?}, found {l:?}")));
    }
    Ok(())
}

fn tagged<'a>(lines: &mut impl Iterator<Item = (usize, &'a str)>, tag: &str) -> Result<&'a str> {
    let (n, l) = next_line(lines)?;
    l.strip_prefix(tag)
        .filter(|rest| rest.starts_with(' '))
        .map(str::trim)
        .ok_or_else(|| parse(n, &format!("expected `{tag} ...`, found {l:?}")))
}

fn block<'a>(lines: &mut impl Iterator<Item = (usize, &'a str)>) -> Result<ParamVector> {
    expect(lines, PARAMS_MAGIC)?;
    ParamVector::parse_after_magic(lines)
}
