//! Evaluation settings with `flag > config file > default` precedence.
//!
//! Config files are `key = value` lines; `#` starts a comment.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::policies::{PlanKind, Policy, PolicyKind, DEFAULT_KERNEL, DEFAULT_SINK};
use crate::smoothing::{SmoothingConfig, DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_WINDOW};

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub alpha: f64,
    pub beta: f64,
    pub window: usize,
    pub sink: usize,
    pub kernel: usize,
    pub seed: u64,
    pub policies: Vec<PolicyKind>,
    pub budgets: Vec<usize>,
    pub plan: PlanKind,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            window: DEFAULT_WINDOW,
            sink: DEFAULT_SINK,
            kernel: DEFAULT_KERNEL,
            seed: 0,
            policies: PolicyKind::ALL.to_vec(),
            budgets: vec![64, 128, 256, 512, 1024],
            plan: PlanKind::Uniform,
        }
    }
}

/// Optional values from one source (a file or the command line).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub window: Option<usize>,
    pub sink: Option<usize>,
    pub kernel: Option<usize>,
    pub seed: Option<u64>,
    pub policies: Option<Vec<PolicyKind>>,
    pub budgets: Option<Vec<usize>>,
    pub plan: Option<PlanKind>,
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.trim()
        .parse()
        .map_err(|e| Error::domain(format!("bad value for {key}: '{v}' ({e})")))
}

pub fn parse_policies(v: &str) -> Result<Vec<PolicyKind>> {
    v.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

pub fn parse_budgets(v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_num("budgets", s))
        .collect()
}

impl Overrides {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::domain(format!("config line {}: expected key=value", lineno + 1)))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut o = Overrides::default();
        for (k, v) in &map {
            match k.as_str() {
                "alpha" => o.alpha = Some(parse_num(k, v)?),
                "beta" => o.beta = Some(parse_num(k, v)?),
                "window" => o.window = Some(parse_num(k, v)?),
                "sink" => o.sink = Some(parse_num(k, v)?),
                "kernel" => o.kernel = Some(parse_num(k, v)?),
                "seed" => o.seed = Some(parse_num(k, v)?),
                "policies" => o.policies = Some(parse_policies(v)?),
                "budgets" => o.budgets = Some(parse_budgets(v)?),
                "plan" => o.plan = Some(v.parse()?),
                other => return Err(Error::domain(format!("unknown config key '{other}'"))),
            }
        }
        Ok(o)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn apply(&self, s: &mut EvalSettings) {
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = &self.$f { s.$f = v.clone(); } )* };
        }
        take!(alpha, beta, window, sink, kernel, seed, policies, budgets, plan);
    }
}

impl EvalSettings {
    /// Defaults, then the file, then command-line flags.
    pub fn resolve(file: Option<&Overrides>, cli: &Overrides) -> Result<Self> {
        let mut s = EvalSettings::default();
        if let Some(f) = file {
            f.apply(&mut s);
        }
        cli.apply(&mut s);
        s.smoothing()?;
        for p in s.policy_list() {
            p.validate()?;
        }
        if s.budgets.is_empty() || s.budgets.contains(&0) {
            return Err(Error::domain("budgets must be a non-empty list of positive counts"));
        }
        Ok(s)
    }

    pub fn smoothing(&self) -> Result<SmoothingConfig> {
        SmoothingConfig::new(self.alpha, self.beta, self.window)
    }

    pub fn policy_list(&self) -> Vec<Policy> {
        self.policies
            .iter()
            .map(|&kind| Policy {
                kind,
                kernel: self.kernel,
                sink: self.sink,
                seed: self.seed,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_settings() {
        let s = EvalSettings::default();
        assert_eq!((s.alpha, s.beta, s.window, s.sink, s.kernel), (0.3, 2000.0, 32, 4, 5));
    }

    #[test]
    fn precedence_flag_over_file_over_default() {
        let file = Overrides::parse("# tuned\nalpha = 0.5\nwindow=16\nbudgets = 48, 96\n\nkernel=7 # wider\n").unwrap();
        let cli = Overrides {
            alpha: Some(0.9),
            ..Default::default()
        };
        let s = EvalSettings::resolve(Some(&file), &cli).unwrap();
        assert_eq!(s.alpha, 0.9);
        assert_eq!(s.window, 16);
        assert_eq!(s.kernel, 7);
        assert_eq!(s.budgets, vec![48, 96]);
        assert_eq!(s.beta, 2000.0);
    }

    #[test]
    fn bad_config_rejected() {
        assert!(Overrides::parse("alpha 0.3").is_err());
        assert!(Overrides::parse("gamma=1").is_err());
        assert!(Overrides::parse("window=abc").is_err());
        assert!(Overrides::parse("policies=rest_kv,h2o").is_err());
        let odd = Overrides::parse("window=31").unwrap();
        assert!(EvalSettings::resolve(Some(&odd), &Overrides::default()).is_err());
        let even_kernel = Overrides::parse("kernel=4").unwrap();
        assert!(EvalSettings::resolve(Some(&even_kernel), &Overrides::default()).is_err());
    }
}
