//! CSV ingestion and export.
//!
//! Header is required. Default columns are `area,y,x1,...,xp,weight,sampled`;
//! a TOML sidecar ([`DataConfig`]) can rename them and declare population
//! sizes for areas whose non-sampled rows are not listed.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{compare_area_ids, AreaFrame, SurveyData, UnitRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub area: Option<String>,
    pub y: Option<String>,
    /// Covariate columns in order; empty means every `x<k>` column.
    pub x: Vec<String>,
    pub weight: Option<String>,
    pub sampled: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub columns: ColumnMap,
    /// Population size per area id, overriding the row count.
    pub population_sizes: BTreeMap<String, usize>,
}

impl DataConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

struct Resolved {
    area: usize,
    y: usize,
    x: Vec<usize>,
    weight: Option<usize>,
    sampled: Option<usize>,
}

fn resolve(headers: &csv::StringRecord, cols: &ColumnMap) -> Result<Resolved> {
    let find = |name: &str| -> Option<usize> { headers.iter().position(|h| h.trim() == name) };
    let need = |name: &str| -> Result<usize> {
        find(name).ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let area = need(cols.area.as_deref().unwrap_or("area"))?;
    let y = need(cols.y.as_deref().unwrap_or("y"))?;
    let x = if cols.x.is_empty() {
        let mut xs: Vec<(usize, usize)> = headers
            .iter()
            .enumerate()
            .filter_map(|(i, h)| {
                let h = h.trim();
                h.strip_prefix('x').and_then(|d| d.parse::<usize>().ok()).map(|k| (k, i))
            })
            .collect();
        xs.sort();
        xs.into_iter().map(|(_, i)| i).collect()
    } else {
        cols.x.iter().map(|c| need(c)).collect::<Result<Vec<_>>>()?
    };
    let weight = match &cols.weight {
        Some(c) => Some(need(c)?),
        None => find("weight"),
    };
    let sampled = match &cols.sampled {
        Some(c) => Some(need(c)?),
        None => find("sampled"),
    };
    Ok(Resolved {
        area,
        y,
        x,
        weight,
        sampled,
    })
}

fn parse_num(field: &str, line: usize, what: &str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| Error::Parse {
        line,
        message: format!("cannot parse {what} value `{field}`"),
    })
}

fn parse_flag(field: &str, line: usize) -> Result<bool> {
    match field.trim().to_ascii_lowercase().as_str() {
        "" | "1" | "true" | "t" | "yes" => Ok(true),
        "0" | "false" | "f" | "no" => Ok(false),
        other => Err(Error::Parse {
            line,
            message: format!("cannot parse sampled flag `{other}`"),
        }),
    }
}

/// Load survey data with the default column names.
pub fn load_csv(path: &Path) -> Result<SurveyData> {
    load_csv_with(path, &DataConfig::default())
}

pub fn load_csv_with(path: &Path, config: &DataConfig) -> Result<SurveyData> {
    let file = std::fs::File::open(path)?;
    read_csv(file, config)
}

/// Parse survey data from any reader. Areas are ordered by id; units keep
/// file order within an area.
pub fn read_csv<R: Read>(reader: R, config: &DataConfig) -> Result<SurveyData> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let cols = resolve(&headers, &config.columns)?;

    let mut order: Vec<String> = Vec::new();
    let mut areas: HashMap<String, (Vec<UnitRecord>, Vec<Vec<f64>>)> = HashMap::new();
    let mut bad_rows = Vec::new();

    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let get = |i: usize| rec.get(i).unwrap_or("");
        let area = get(cols.area).trim().to_string();
        if area.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty area id".into(),
            });
        }
        let sampled = match cols.sampled {
            Some(i) => parse_flag(get(i), line)?,
            None => true,
        };
        let mut x = Vec::with_capacity(cols.x.len() + 1);
        x.push(1.0);
        for &i in &cols.x {
            x.push(parse_num(get(i), line, "covariate")?);
        }
        let entry = areas.entry(area.clone()).or_insert_with(|| {
            order.push(area.clone());
            (Vec::new(), Vec::new())
        });
        if sampled {
            let yf = get(cols.y);
            if yf.trim().is_empty() {
                return Err(Error::Parse {
                    line,
                    message: "missing response on a sampled row".into(),
                });
            }
            let y = parse_num(yf, line, "response")?;
            if !(y > 0.0) {
                bad_rows.push(line);
            }
            let weight = match cols.weight {
                Some(i) if !get(i).trim().is_empty() => Some(parse_num(get(i), line, "weight")?),
                _ => None,
            };
            entry.0.push(UnitRecord::new(y, x, weight));
        } else {
            entry.1.push(x);
        }
    }
    if !bad_rows.is_empty() {
        return Err(Error::Validation { rows: bad_rows });
    }
    for id in config.population_sizes.keys() {
        if !areas.contains_key(id) {
            return Err(Error::Schema(format!("population size declared for unknown area `{id}`")));
        }
    }

    order.sort_by(|a, b| compare_area_ids(a, b));
    let mut frames = Vec::with_capacity(order.len());
    for id in order {
        let (s, r) = areas.remove(&id).expect("area recorded");
        let mut frame = AreaFrame::new(id.clone(), s, r);
        if let Some(&n_pop) = config.population_sizes.get(&id) {
            frame = frame.with_population_size(n_pop)?;
        }
        frames.push(frame);
    }
    SurveyData::new(frames)
}

/// Write survey data in the default schema; floats use the shortest
/// representation that parses back to the same bits.
pub fn write_csv<W: Write>(data: &SurveyData, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["area".to_string(), "y".to_string()];
    header.extend((1..=data.p).map(|k| format!("x{k}")));
    header.push("weight".into());
    header.push("sampled".into());
    w.write_record(&header)?;
    for a in &data.areas {
        for u in &a.sampled_units {
            let mut row = vec![a.area_id.clone(), format!("{}", u.y)];
            row.extend(u.x[1..].iter().map(|v| format!("{v}")));
            row.push(u.weight.map(|v| format!("{v}")).unwrap_or_default());
            row.push("1".into());
            w.write_record(&row)?;
        }
        for x in &a.nonsampled_covariates {
            let mut row = vec![a.area_id.clone(), String::new()];
            row.extend(x[1..].iter().map(|v| format!("{v}")));
            row.push(String::new());
            row.push("0".into());
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse(s: &str) -> Result<SurveyData> {
        read_csv(s.as_bytes(), &DataConfig::default())
    }

    #[test]
    fn one_area_all_sampled() {
        let d = parse("area,y,x1\nA,1.0,0.5\nA,2.0,0.1\nA,3.5,0.2\n").unwrap();
        assert_eq!(d.num_areas(), 1);
        assert_eq!(d.areas[0].n(), 3);
        assert_eq!(d.areas[0].population_size(), 3);
        assert_eq!(d.p, 1);
        assert_eq!(d.areas[0].sampled_units[1].x, vec![1.0, 0.1]);
    }

    #[test]
    fn sampled_and_nonsampled_rows() {
        let d = parse("area,y,x1,weight,sampled\nB,1.0,0.5,2,1\nA,,0.3,,0\nA,0.7,0.1,3,1\nB,,0.2,,0\nB,,0.9,,0\n").unwrap();
        assert_eq!(d.areas[0].area_id, "A");
        assert_eq!(d.areas[0].n(), 1);
        assert_eq!(d.areas[0].population_size(), 2);
        assert_eq!(d.areas[1].n(), 1);
        assert_eq!(d.areas[1].population_size(), 3);
        assert_eq!(d.areas[1].nonsampled_covariates, vec![vec![1.0, 0.2], vec![1.0, 0.9]]);
        assert_eq!(d.areas[0].sampled_units[0].weight, Some(3.0));
    }

    #[test]
    fn missing_column() {
        let err = parse("area,resp,x1\nA,1,2\n").unwrap_err();
        assert!(matches!(err, Error::Schema(ref m) if m.contains("`y`")), "{err}");
    }

    #[test]
    fn non_positive_response_lists_rows() {
        let err = parse("area,y,x1\nA,1,2\nA,0,2\nA,3,1\nA,-2,1\n").unwrap_err();
        match err {
            Error::Validation { rows } => assert_eq!(rows, vec![3, 5]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unparseable_number_reports_line() {
        let err = parse("area,y,x1\nA,1,2\nA,abc,2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err:?}");
    }

    #[test]
    fn missing_y_only_when_not_sampled() {
        assert!(matches!(parse("area,y,x1,sampled\nA,,2,1\n"), Err(Error::Parse { line: 2, .. })));
        assert!(parse("area,y,x1,sampled\nA,1,2,1\nA,,2,0\n").is_ok());
    }

    #[test]
    fn column_mapping_and_population_override() {
        let cfg = DataConfig::from_toml_str(
            r#"
            [columns]
            area = "county"
            y = "rusle2"
            x = ["usle"]
            [population_sizes]
            "C1" = 40
            "#,
        )
        .unwrap();
        let d = read_csv("county,rusle2,usle\nC1,0.3,2.0\nC1,0.2,4.0\n".as_bytes(), &cfg).unwrap();
        assert_eq!(d.areas[0].population_size(), 40);
        assert!(!d.areas[0].has_complete_covariates());
    }

    #[test]
    fn numeric_area_ordering() {
        let d = parse("area,y,x1\n10,1,1\n9,1,1\n1,1,1\n").unwrap();
        let ids: Vec<_> = d.areas.iter().map(|a| a.area_id.as_str()).collect();
        assert_eq!(ids, vec!["1", "9", "10"]);
    }

    proptest! {
        #[test]
        fn write_read_round_trip_is_bit_exact(
            ys in proptest::collection::vec(1e-300f64..1e300, 1..20),
            xs in proptest::collection::vec(-1e6f64..1e6, 20),
            n_rest in 0usize..5,
        ) {
            let units: Vec<UnitRecord> = ys.iter().enumerate()
                .map(|(i, &y)| UnitRecord::new(y, vec![1.0, xs[i]], Some(1.0 + y.abs().min(1e6))))
                .collect();
            let rest: Vec<Vec<f64>> = (0..n_rest).map(|k| vec![1.0, xs[19 - k]]).collect();
            let data = SurveyData::new(vec![AreaFrame::new("z", units, rest)]).unwrap();
            let mut buf = Vec::new();
            write_csv(&data, &mut buf).unwrap();
            let back = read_csv(buf.as_slice(), &DataConfig::default()).unwrap();
            prop_assert_eq!(back, data);
        }
    }
}
