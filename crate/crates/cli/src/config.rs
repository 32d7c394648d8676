//! Experiment configuration: defaults, then the `--config` file, then flags.

use std::collections::BTreeMap;

use she_core::kv::{self, Entry};
use she_core::nonlinearity::SPEC_KEYS;
use she_core::{Error, GridConfig, NonlinearitySpec, Result, SnapshotSchedule};

pub const BUILD_ID: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// Keys accepted in a config file besides the nonlinearity keys.
const KEYS: &[&str] = &[
    "command",
    "build",
    "grid_L",
    "grid_nx",
    "dt",
    "T",
    "clamp_negative",
    "allow_narrow_domain",
    "seed",
    "paths",
    "snapshots",
    "snapshot_files",
    "record_noise",
    "u0_r",
    "u0_h",
    "theta_rel",
    "theta_pos",
    "window_t",
    "window_x",
    "R_list",
    "qv_beta",
    "holder_a",
    "holder_gamma",
    "holder_samples",
    "scheme",
    "alpha_pos",
    "alpha_csp",
    "k_max",
    "k_max_sum",
    "betas",
    "m_list",
    "reference_m",
    "lo_r",
    "lo_h",
    "prop_T",
    "prop_M",
    "prop_eta",
    "prop_r",
];

#[derive(Debug, Clone)]
struct Value {
    text: String,
    /// Source line in the config file, 0 for defaults and flags.
    line: usize,
}

#[derive(Debug, Clone)]
pub struct Config {
    pub command: String,
    values: BTreeMap<String, Value>,
}

fn defaults(command: &str) -> Vec<(&'static str, &'static str)> {
    let mut d = vec![
        ("grid_L", "8"),
        ("grid_nx", "512"),
        ("T", "0.5"),
        ("clamp_negative", "false"),
        ("allow_narrow_domain", "false"),
        ("seed", "1"),
        ("paths", "16"),
        ("u0_r", "1"),
        ("u0_h", "1"),
        ("theta_rel", "1e-10"),
        ("theta_pos", "1e-12"),
        ("snapshot_files", "first"),
        ("record_noise", "false"),
    ];
    let specific: &[(&str, &str)] = match command {
        "simulate" => &[
            ("family", "power_law"),
            ("gamma", "0.5"),
            ("snapshots", "every:8"),
            ("R_list", "2,3,4,5,6"),
            ("qv_beta", "0.5"),
            ("holder_a", "1"),
            ("holder_gamma", "0.2"),
            ("holder_samples", "10000"),
        ],
        "deterministic" => &[
            ("family", "power_law"),
            ("gamma", "0.5"),
            ("grid_nx", "1024"),
            ("T", "1"),
            ("snapshots", "every:64"),
            ("scheme", "split"),
        ],
        "conditions" => &[
            ("family", "log_corrected"),
            ("gamma", "0"),
            ("betas", "0.1,0.2,1,2,3"),
            ("alpha_pos", "0.24"),
            ("alpha_csp", "2.51"),
            ("k_max", "1000000"),
            ("k_max_sum", "10000"),
        ],
        "converge" => &[
            ("family", "power_law"),
            ("gamma", "0.5"),
            ("grid_nx", "256"),
            ("T", "0.1"),
            ("paths", "8"),
            ("m_list", "2,4,8,16,32"),
            ("reference_m", "64"),
        ],
        "compare" => &[
            ("family", "linear"),
            ("c", "1"),
            ("T", "0.25"),
            ("paths", "32"),
            ("snapshots", "all"),
            ("lo_r", "0.5"),
            ("lo_h", "0.5"),
        ],
        "propagation" => &[
            ("prop_T", "1"),
            ("prop_M", "1"),
            ("prop_eta", "0.2"),
            ("prop_r", "0.5"),
            ("m_list", "10:1000:10"),
        ],
        "sweep" => &[
            ("family", "log_corrected"),
            ("gamma", "0"),
            ("betas", "0.1,3"),
            ("snapshots", "every:8"),
        ],
        _ => &[],
    };
    d.extend_from_slice(specific);
    d
}

impl Config {
    /// Defaults for `command`, overlaid by `file_text` (if any) and then `flags`.
    pub fn resolve(
        command: &str,
        file_text: Option<&str>,
        flags: &[(String, String)],
    ) -> Result<Self> {
        let mut values: BTreeMap<String, Value> = defaults(command)
            .into_iter()
            .map(|(k, v)| {
                (
                    k.to_string(),
                    Value {
                        text: v.to_string(),
                        line: 0,
                    },
                )
            })
            .collect();
        if let Some(text) = file_text {
            let entries = kv::parse(text)?;
            if entries.iter().any(|e| e.key == "family") {
                // a new family discards the default shape parameters
                for k in ["gamma", "beta", "c", "table"] {
                    values.remove(k);
                }
            }
            for e in entries {
                if !KEYS.contains(&e.key.as_str()) && !SPEC_KEYS.contains(&e.key.as_str()) {
                    return Err(Error::Parse {
                        line: e.line,
                        message: format!("unknown key `{}`", e.key),
                    });
                }
                if e.key == "command" && e.value != command {
                    return Err(Error::Parse {
                        line: e.line,
                        message: format!("config is for `{}`, not `{command}`", e.value),
                    });
                }
                values.insert(
                    e.key,
                    Value {
                        text: e.value,
                        line: e.line,
                    },
                );
            }
        }
        for (k, v) in flags {
            values.insert(
                k.clone(),
                Value {
                    text: v.clone(),
                    line: 0,
                },
            );
        }
        values.remove("command");
        values.remove("build");
        Ok(Config {
            command: command.to_string(),
            values,
        })
    }

    fn entry(&self, key: &str) -> Option<Entry> {
        self.values.get(key).map(|v| Entry {
            line: v.line,
            key: key.to_string(),
            value: v.text.clone(),
        })
    }

    fn required(&self, key: &str) -> Result<Entry> {
        self.entry(key)
            .ok_or_else(|| Error::Config(format!("missing setting `{key}`")))
    }

    pub fn has(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    pub fn str(&self, key: &str) -> Result<String> {
        Ok(self.required(key)?.value)
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        kv::parse_f64(&self.required(key)?)
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        let e = self.required(key)?;
        // allow 1e4-style integers
        match kv::parse_u64(&e) {
            Ok(v) => Ok(v),
            Err(err) => {
                let f = kv::parse_f64(&e).map_err(|_| err.clone())?;
                if f >= 0.0 && f.fract() == 0.0 && f < 9.0e15 {
                    Ok(f as u64)
                } else {
                    Err(err)
                }
            }
        }
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        Ok(self.u64(key)? as usize)
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        let e = self.required(key)?;
        match e.value.as_str() {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(Error::Parse {
                line: e.line,
                message: format!("`{other}` is not a boolean (key `{key}`)"),
            }),
        }
    }

    /// Comma-separated numbers; `a:b:step` expands to an inclusive range.
    pub fn list(&self, key: &str) -> Result<Vec<f64>> {
        let e = self.required(key)?;
        parse_list(&e)
    }

    pub fn pair(&self, key: &str) -> Result<(f64, f64)> {
        let e = self.required(key)?;
        match parse_list(&e)?.as_slice() {
            [a, b] if a <= b => Ok((*a, *b)),
            _ => Err(Error::Parse {
                line: e.line,
                message: format!("`{key}` must be two ascending numbers `lo,hi`"),
            }),
        }
    }

    pub fn spec(&self) -> Result<NonlinearitySpec> {
        let entries: Vec<Entry> = SPEC_KEYS.iter().filter_map(|k| self.entry(k)).collect();
        NonlinearitySpec::from_entries(&entries)
    }

    /// Spec with `beta` replaced, for per-β sweeps of the logarithmic family.
    pub fn spec_with_beta(&self, beta: f64) -> Result<NonlinearitySpec> {
        let mut entries: Vec<Entry> = SPEC_KEYS
            .iter()
            .filter(|k| **k != "beta")
            .filter_map(|k| self.entry(k))
            .collect();
        entries.push(Entry {
            line: 0,
            key: "beta".into(),
            value: kv::fmt_exact(beta),
        });
        NonlinearitySpec::from_entries(&entries)
    }

    pub fn grid(&self) -> Result<GridConfig> {
        let l = self.f64("grid_L")?;
        let n_x = self.usize("grid_nx")?;
        let horizon = self.f64("T")?;
        let mut g = if self.has("dt") {
            GridConfig::new(l, n_x, self.f64("dt")?, horizon)?
        } else {
            GridConfig::auto(l, n_x, horizon)?
        };
        g.clamp_negative = self.bool("clamp_negative")?;
        g.allow_narrow_domain = self.bool("allow_narrow_domain")?;
        Ok(g)
    }

    /// `all`, `every:K`, or a list of times.
    pub fn schedule(&self) -> Result<SnapshotSchedule> {
        let e = self.required("snapshots")?;
        let v = e.value.trim();
        if v == "all" {
            return Ok(SnapshotSchedule::EveryStep);
        }
        if let Some(k) = v.strip_prefix("every:") {
            let k = k.trim().parse::<usize>().map_err(|_| Error::Parse {
                line: e.line,
                message: format!("bad stride in `{v}`"),
            })?;
            return Ok(SnapshotSchedule::Every(k));
        }
        Ok(SnapshotSchedule::Times(parse_list(&e)?))
    }

    /// Resolved settings as sorted `key=value` lines, prefixed by the command
    /// and build id. Feeding this back through `--config` reproduces the run.
    pub fn manifest(&self) -> String {
        let mut out = format!(
            "# resolved configuration\ncommand={}\nbuild={BUILD_ID}\n",
            self.command
        );
        for (k, v) in &self.values {
            out.push_str(&format!("{k}={}\n", v.text));
        }
        out
    }
}

fn parse_list(e: &Entry) -> Result<Vec<f64>> {
    let bad = |s: &str| Error::Parse {
        line: e.line,
        message: format!("bad number `{s}` in `{}`", e.key),
    };
    let mut out = Vec::new();
    for part in e.value.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if part.contains(':') {
            let bits: Vec<&str> = part.split(':').collect();
            if bits.len() != 3 {
                return Err(Error::Parse {
                    line: e.line,
                    message: format!("range `{part}` must be start:end:step"),
                });
            }
            let nums: Vec<f64> = bits
                .iter()
                .map(|b| b.trim().parse::<f64>().map_err(|_| bad(b)))
                .collect::<Result<_>>()?;
            let (a, b, step) = (nums[0], nums[1], nums[2]);
            if !(step > 0.0) || b < a {
                return Err(Error::Parse {
                    line: e.line,
                    message: format!("range `{part}` is empty or has a non-positive step"),
                });
            }
            let n = ((b - a) / step + 1e-9).floor() as usize;
            out.extend((0..=n).map(|j| a + j as f64 * step));
        } else {
            out.push(part.parse::<f64>().map_err(|_| bad(part))?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_and_manifest_round_trip() {
        let file = "family=linear\nc=2\nseed=5\n";
        let flags = vec![("seed".to_string(), "9".to_string())];
        let c = Config::resolve("simulate", Some(file), &flags).unwrap();
        assert_eq!(c.u64("seed").unwrap(), 9);
        assert_eq!(c.spec().unwrap(), NonlinearitySpec::linear(2.0).unwrap());
        let again = Config::resolve("simulate", Some(&c.manifest()), &[]).unwrap();
        assert_eq!(again.manifest(), c.manifest());
    }

    #[test]
    fn errors_carry_lines() {
        let err = Config::resolve("simulate", Some("seed=1\nbogus=2\n"), &[]).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let c = Config::resolve("simulate", Some("\nT=abc\n"), &[]).unwrap();
        assert!(matches!(c.f64("T"), Err(Error::Parse { line: 2, .. })));
        assert!(Config::resolve("simulate", Some("command=sweep\n"), &[]).is_err());
    }

    #[test]
    fn lists_and_ranges() {
        let c = Config::resolve("propagation", None, &[]).unwrap();
        let ms = c.list("m_list").unwrap();
        assert_eq!(ms.len(), 100);
        assert_eq!((ms[0], ms[99]), (10.0, 1000.0));
    }
}
