use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Environment, EnvironmentBundle};
use crate::{Error, Result};

/// On-disk dataset formats.
///
/// CSV: header `env,y,x0,x1,...`, one row per example. JSON:
/// `{"environments": [{"id": .., "features": [[..]], "labels": [..]}]}`.
/// Floats are written in shortest round-trip form, so both formats
/// reproduce every finite double bit-exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Json,
}

impl DataFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "csv" => Some(Self::Csv),
            "json" => Some(Self::Json),
            _ => None,
        }
    }
}

pub fn load_bundle(path: &Path, format: DataFormat) -> Result<EnvironmentBundle> {
    let text = fs::read_to_string(path)?;
    match format {
        DataFormat::Csv => parse_csv(&text),
        DataFormat::Json => parse_json(&text),
    }
}

pub fn save_bundle(bundle: &EnvironmentBundle, path: &Path, format: DataFormat) -> Result<()> {
    let text = match format {
        DataFormat::Csv => to_csv(bundle),
        DataFormat::Json => serde_json::to_string(bundle)? + "\n",
    };
    fs::write(path, text)?;
    Ok(())
}

fn parse_json(text: &str) -> Result<EnvironmentBundle> {
    if text.trim().is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: "empty file".into(),
        });
    }
    serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        msg: e.to_string(),
    })
}

pub(crate) fn to_csv(bundle: &EnvironmentBundle) -> String {
    let mut out = String::from("env,y");
    for j in 0..bundle.feature_dim() {
        let _ = write!(out, ",x{j}");
    }
    out.push('\n');
    for env in bundle.environments() {
        for (row, y) in env.features.iter().zip(&env.labels) {
            out.push_str(&env.id);
            let _ = write!(out, ",{y}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
    }
    out
}

pub(crate) fn parse_csv(text: &str) -> Result<EnvironmentBundle> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let header = match records.next() {
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: "empty file".into(),
            })
        }
        Some(r) => r.map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?,
    };
    if header.len() < 2 || &header[0] != "env" || &header[1] != "y" {
        return Err(Error::Parse {
            line: 1,
            msg: "header must start with `env,y`".into(),
        });
    }
    let d = header.len() - 2;
    for (j, name) in header.iter().skip(2).enumerate() {
        if name != format!("x{j}") {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected column x{j}, found {name:?}"),
            });
        }
    }

    // grouped in first-appearance order of env ids
    let mut envs: Vec<Environment> = Vec::new();
    let mut rows = 0usize;
    for rec in records {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        if rec.len() != d + 2 {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} fields, found {}", d + 2, rec.len()),
            });
        }
        let id = rec[0].trim();
        if id.is_empty() {
            return Err(Error::Parse {
                line,
                msg: "empty env id".into(),
            });
        }
        let num = |s: &str, col: &str| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|_| Error::Parse {
                line,
                msg: format!("column {col}: not a number: {s:?}"),
            })
        };
        let y = num(&rec[1], "y")?;
        let x = (0..d)
            .map(|j| num(&rec[j + 2], &format!("x{j}")))
            .collect::<Result<Vec<_>>>()?;
        match envs.iter_mut().find(|e| e.id == id) {
            Some(e) => {
                e.features.push(x);
                e.labels.push(y);
            }
            None => envs.push(Environment {
                id: id.to_string(),
                features: vec![x],
                labels: vec![y],
            }),
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Parse {
            line: 2,
            msg: "no data rows".into(),
        });
    }
    EnvironmentBundle::new(envs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_rows_by_env() {
        let text = "env,y,x0,x1\na,1,0.5,1\nb,0,1,2\na,0,3,4\nb,1,5,6\n";
        let b = parse_csv(text).unwrap();
        assert_eq!(b.num_environments(), 2);
        assert_eq!(b.environments()[0].id, "a");
        assert_eq!(
            b.environments()[0].features,
            vec![vec![0.5, 1.0], vec![3.0, 4.0]]
        );
        assert_eq!(b.environments()[1].labels, vec![0.0, 1.0]);
    }

    #[test]
    fn missing_column_reports_line() {
        let text = "env,y,x0,x1\na,1,0.5,1\nb,0,1\n";
        match parse_csv(text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_number_reports_line() {
        let text = "env,y,x0\na,1,0.5\na,1,zz\n";
        assert!(matches!(parse_csv(text), Err(Error::Parse { line: 3, .. })));
    }

    #[test]
    fn empty_inputs_are_errors() {
        assert!(matches!(parse_csv(""), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_csv("env,y,x0\n"), Err(Error::Parse { .. })));
        assert!(matches!(
            parse_json("  "),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(parse_csv("id,label\n").is_err());
    }

    #[test]
    fn csv_prints_shortest_roundtrip_floats() {
        let env = Environment {
            id: "e".into(),
            features: vec![vec![0.1 + 0.2, -1e-300, 12345.678901234567]],
            labels: vec![1.0],
        };
        let b = EnvironmentBundle::new(vec![env]).unwrap();
        let back = parse_csv(&to_csv(&b)).unwrap();
        assert_eq!(b, back);
    }
}
