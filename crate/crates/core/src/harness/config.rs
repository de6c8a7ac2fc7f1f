//! Plain-text `key = value` scenario files.
//!
//! ```text
//! # start from a catalog row, then override
//! scenario = 4
//! I = 32
//! K_control = 25
//! K_treated = 50,75,100,125
//! pattern_control = uniform
//! pattern_treated = cluster-period
//! ```

use std::path::Path;

use super::Scenario;
use crate::error::{Error, Result};
use crate::recruitment::{SizeRule, TreatedSize};

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "`{key}` expects true/false, got `{v}`"
        ))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}` has an invalid value `{v}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| parse_num(key, x.trim())).collect()
}

/// Parse a scenario file. `scenario = <id>` selects the catalog row to
/// start from (default 4); it may appear anywhere in the file.
pub fn parse_config(text: &str) -> Result<Scenario> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    let base = match pairs.iter().find(|(k, _)| k == "scenario") {
        Some((k, v)) => parse_num::<usize>(k, v)?,
        None => 4,
    };
    let mut s = Scenario::catalog(base)?;
    let mut named = false;
    let mut treated: Option<TreatedSize> = None;
    for (k, v) in &pairs {
        let (k, v) = (k.as_str(), v.as_str());
        match k {
            "scenario" => {}
            "name" => {
                s.name = v.to_string();
                named = true;
            }
            "I" | "clusters" => s.n_clusters = parse_num(k, v)?,
            "J" | "periods" => s.n_periods = parse_num(k, v)?,
            "K" => {
                let size = parse_num(k, v)?;
                s.sizes = SizeRule::constant(size);
                treated = Some(TreatedSize::Constant(size));
            }
            "K_control" => s.sizes.control = parse_num(k, v)?,
            "K_treated" => {
                let list: Vec<usize> = parse_list(k, v)?;
                treated = Some(if list.len() == 1 {
                    TreatedSize::Constant(list[0])
                } else {
                    TreatedSize::ByExposure(list)
                });
            }
            "pattern" => {
                let p = v.parse()?;
                s.control_pattern = p;
                s.treated_pattern = p;
            }
            "pattern_control" => s.control_pattern = v.parse()?,
            "pattern_treated" => s.treated_pattern = v.parse()?,
            "rate" => s.exponential_rate = parse_num(k, v)?,
            "rho0" => s.rho0 = parse_num(k, v)?,
            "rho1" => s.rho1 = parse_num(k, v)?,
            "cac" | "CAC" => s.cac = parse_num(k, v)?,
            "sigma_eps_sq" => s.sigma_eps_sq = parse_num(k, v)?,
            "delta" => s.delta = parse_num(k, v)?,
            "delta_s" => s.delta_s = parse_list(k, v)?,
            "period_effect" => {
                s.continuous_period = match v {
                    "continuous" => true,
                    "discrete" => false,
                    _ => {
                        return Err(Error::Config(format!(
                            "`period_effect` is continuous or discrete, got `{v}`"
                        )))
                    }
                }
            }
            "exposure_dependent" | "time_varying" => s.exposure_dependent = parse_bool(k, v)?,
            "ri" | "RI" | "random_intervention" => s.random_intervention = parse_bool(k, v)?,
            "working" => s.working = v.parse()?,
            "within_period_decay" => s.within_period_decay = parse_bool(k, v)?,
            "level" => s.level = parse_num(k, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
    }
    if let Some(t) = treated {
        s.sizes.treated = t;
    }
    if s.exposure_dependent && s.delta_s.is_empty() {
        return Err(Error::Config(
            "exposure-dependent scenarios need `delta_s`".into(),
        ));
    }
    if !named {
        s.name = format!("{}-custom", s.name);
    }
    s.id = None;
    s.validate()?;
    Ok(s)
}

pub fn parse_config_file(path: &Path) -> Result<Scenario> {
    parse_config(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::Structure;
    use crate::recruitment::PatternKind;

    #[test]
    fn overrides_catalog_row() {
        let s = parse_config(
            "scenario = 5\nname = vii\nK_control = 25 # control\nK_treated = 50, 75, 100, 125\n\
             pattern_control = uniform\npattern_treated = cp\nrho1 = 0.1\n",
        )
        .unwrap();
        assert_eq!(s.working, Structure::Ne);
        assert_eq!(s.name, "vii");
        assert_eq!(s.sizes, SizeRule::by_exposure(25, vec![50, 75, 100, 125]));
        assert_eq!(
            (s.control_pattern, s.treated_pattern),
            (PatternKind::Uniform, PatternKind::ClusterPeriodMixed)
        );
    }

    #[test]
    fn rejects_bad_input() {
        assert!(parse_config("foo = 1").is_err());
        assert!(parse_config("rho0").is_err());
        assert!(parse_config("I = many").is_err());
        assert!(parse_config("working = ctd").is_err());
        assert!(parse_config("scenario = 16\nJ = 6").is_err());
        assert!(parse_config("rho0 = 0.2\nrho1 = 0.1").is_err());
    }

    #[test]
    fn default_base_is_scenario_four() {
        let s = parse_config("").unwrap();
        assert_eq!(s.flags(), Scenario::catalog(4).unwrap().flags());
        assert_eq!(s.id, None);
    }
}
