//! The sensitivity table and its JSON / CSV forms.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Composition, MetricKind};
use crate::config::{BitWidth, ConfigSpace, KeepRatio, LayerCompressionConfig};
use crate::error::{Error, Result};
use crate::eviction::ScorerKind;

pub const TABLE_FORMAT_VERSION: u32 = 1;

/// Identity scores above this are rejected on construction and load.
const IDENTITY_TOLERANCE: f64 = 1e-7;

/// `L x |C|` sensitivity scores, row-major by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityTable {
    model_spec_hash: String,
    prompt_id: String,
    scorer: ScorerKind,
    metric: MetricKind,
    seed: u64,
    composition: Composition,
    space: ConfigSpace,
    num_layers: usize,
    scores: Vec<f64>,
}

impl SensitivityTable {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model_spec_hash: String,
        prompt_id: String,
        scorer: ScorerKind,
        metric: MetricKind,
        seed: u64,
        composition: Composition,
        space: ConfigSpace,
        num_layers: usize,
        scores: Vec<f64>,
    ) -> Result<Self> {
        let t = Self {
            model_spec_hash,
            prompt_id,
            scorer,
            metric,
            seed,
            composition,
            space,
            num_layers,
            scores,
        };
        t.validate()?;
        Ok(t)
    }

    /// Table built from raw scores for tests and synthetic solver instances.
    pub fn from_scores(space: ConfigSpace, rows: Vec<Vec<f64>>) -> Result<Self> {
        let num_layers = rows.len();
        if let Some(r) = rows.iter().find(|r| r.len() != space.len()) {
            return Err(Error::Input(format!(
                "row of length {} for a {}-config space",
                r.len(),
                space.len()
            )));
        }
        Self::new(
            "synthetic".into(),
            "synthetic".into(),
            ScorerKind::RandomPerm,
            MetricKind::L2Proxy,
            0,
            Composition::Direct,
            space,
            num_layers,
            rows.concat(),
        )
    }

    fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Input("table needs at least one layer".into()));
        }
        if self.scores.len() != self.num_layers * self.space.len() {
            return Err(Error::Shape(format!(
                "{} scores for {} layers x {} configs",
                self.scores.len(),
                self.num_layers,
                self.space.len()
            )));
        }
        if let Some(i) = self.scores.iter().position(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Input(format!(
                "score {} at layer {}, column {} is not finite and nonnegative",
                self.scores[i],
                i / self.space.len(),
                i % self.space.len()
            )));
        }
        let id = self.space.identity_index();
        if let Some(l) = (0..self.num_layers).find(|&l| self.score(l, id) > IDENTITY_TOLERANCE) {
            return Err(Error::Input(format!(
                "identity score {} on layer {l} is not zero",
                self.score(l, id)
            )));
        }
        Ok(())
    }

    pub fn model_spec_hash(&self) -> &str {
        &self.model_spec_hash
    }

    pub fn prompt_id(&self) -> &str {
        &self.prompt_id
    }

    pub fn scorer(&self) -> ScorerKind {
        self.scorer
    }

    pub fn metric(&self) -> MetricKind {
        self.metric
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn composition(&self) -> Composition {
        self.composition
    }

    pub fn space(&self) -> &ConfigSpace {
        &self.space
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    /// Score of column `index` (position in [`space`](Self::space)) on `layer`.
    pub fn score(&self, layer: usize, index: usize) -> f64 {
        self.scores[layer * self.space.len() + index]
    }

    pub fn row(&self, layer: usize) -> &[f64] {
        let c = self.space.len();
        &self.scores[layer * c..(layer + 1) * c]
    }

    /// Score of `config` on `layer`, if the config is a column.
    pub fn score_of(&self, layer: usize, config: &LayerCompressionConfig) -> Option<f64> {
        self.space.index_of(config).map(|i| self.score(layer, i))
    }

    /// Restricts the table to the columns of `space`.
    pub fn select(&self, space: &ConfigSpace) -> Result<Self> {
        let idx: Vec<usize> = space
            .configs()
            .iter()
            .map(|c| {
                self.space
                    .index_of(c)
                    .ok_or_else(|| Error::Input(format!("config {c} is not a column of the table")))
            })
            .collect::<Result<_>>()?;
        let scores = (0..self.num_layers)
            .flat_map(|l| idx.iter().map(move |&i| (l, i)))
            .map(|(l, i)| self.score(l, i))
            .collect();
        Ok(Self {
            space: space.clone(),
            scores,
            ..self.clone()
        })
    }

    /// Writes `layer,config_id,keep,k_bits,v_bits,score` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Format(format!("csv: {e}"));
        w.write_record(["layer", "config_id", "keep", "k_bits", "v_bits", "score"])
            .map_err(err)?;
        for l in 0..self.num_layers {
            for (i, c) in self.space.configs().iter().enumerate() {
                w.write_record([
                    l.to_string(),
                    c.id().to_string(),
                    c.keep.value().to_string(),
                    c.k_bits.bits().to_string(),
                    c.v_bits.bits().to_string(),
                    self.score(l, i).to_string(),
                ])
                .map_err(err)?;
            }
        }
        w.flush().map_err(|e| Error::Format(format!("csv: {e}")))
    }

    pub fn to_json(&self) -> String {
        let file = TableFile {
            format_version: TABLE_FORMAT_VERSION,
            model_spec_hash: self.model_spec_hash.clone(),
            prompt_id: self.prompt_id.clone(),
            metric: self.metric,
            scorer: self.scorer,
            seed: self.seed,
            composition: self.composition,
            configs: self
                .space
                .configs()
                .iter()
                .map(|c| ConfigEntry {
                    id: c.id(),
                    keep: c.keep.value(),
                    k_bits: c.k_bits.bits(),
                    v_bits: c.v_bits.bits(),
                })
                .collect(),
            scores: (0..self.num_layers).map(|l| self.row(l).to_vec()).collect(),
        };
        serde_json::to_string_pretty(&file).expect("table serializes")
    }

    /// Parses a table document; `expected_hash` rejects tables built for another model.
    pub fn from_json(s: &str, expected_hash: Option<&str>) -> Result<Self> {
        let file: TableFile = serde_json::from_str(s).map_err(|e| Error::Format(format!("sensitivity table: {e}")))?;
        if file.format_version != TABLE_FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported table format_version {} (expected {TABLE_FORMAT_VERSION})",
                file.format_version
            )));
        }
        if let Some(expected) = expected_hash {
            if expected != file.model_spec_hash {
                return Err(Error::StaleCalibration {
                    expected: expected.to_string(),
                    found: file.model_spec_hash,
                });
            }
        }
        let configs = file
            .configs
            .iter()
            .map(|e| {
                let c = LayerCompressionConfig::new(
                    KeepRatio::try_from(e.keep)?,
                    BitWidth::try_from(e.k_bits)?,
                    BitWidth::try_from(e.v_bits)?,
                );
                if c.id() != e.id {
                    return Err(Error::Format(format!(
                        "config id {} does not match its fields {c}",
                        e.id
                    )));
                }
                Ok(c)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(as_format)?;
        let n = configs.len();
        let space = ConfigSpace::from_configs(configs.clone()).map_err(as_format)?;
        if space.configs() != configs.as_slice() {
            return Err(Error::Format("configs must be listed in ascending id order".into()));
        }
        if let Some(r) = file.scores.iter().find(|r| r.len() != n) {
            return Err(Error::Format(format!(
                "score row of length {} for {n} configs",
                r.len()
            )));
        }
        Self::new(
            file.model_spec_hash,
            file.prompt_id,
            file.scorer,
            file.metric,
            file.seed,
            file.composition,
            space,
            file.scores.len(),
            file.scores.concat(),
        )
        .map_err(as_format)
    }
}

fn as_format(e: Error) -> Error {
    match e {
        Error::Format(_) => e,
        other => Error::Format(other.to_string()),
    }
}

#[derive(Serialize, Deserialize)]
struct ConfigEntry {
    id: usize,
    keep: f64,
    k_bits: u32,
    v_bits: u32,
}

#[derive(Serialize, Deserialize)]
struct TableFile {
    format_version: u32,
    model_spec_hash: String,
    prompt_id: String,
    metric: MetricKind,
    scorer: ScorerKind,
    seed: u64,
    #[serde(default)]
    composition: Composition,
    configs: Vec<ConfigEntry>,
    scores: Vec<Vec<f64>>,
}

pub fn save_table(table: &SensitivityTable, path: &Path) -> Result<()> {
    std::fs::write(path, table.to_json()).map_err(|e| Error::io(path, e))
}

pub fn load_table(path: &Path, expected_hash: Option<&str>) -> Result<SensitivityTable> {
    let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SensitivityTable::from_json(&s, expected_hash)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SpaceKind;

    fn table() -> SensitivityTable {
        let space = ConfigSpace::named(SpaceKind::Table2);
        let rows = (0..3)
            .map(|l| {
                space
                    .configs()
                    .iter()
                    .map(|c| {
                        if c.is_identity() {
                            0.0
                        } else {
                            0.125 * (l + 1) as f64 + c.id() as f64 / 7.0
                        }
                    })
                    .collect()
            })
            .collect();
        SensitivityTable::from_scores(space, rows).unwrap()
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        let t = table();
        save_table(&t, &path).unwrap();
        assert_eq!(load_table(&path, Some("synthetic")).unwrap(), t);
        assert_eq!(load_table(&path, None).unwrap(), t);
    }

    #[test]
    fn tampered_hash_is_stale() {
        let json = table().to_json().replace("\"synthetic\"", "\"deadbeef\"");
        assert!(matches!(
            SensitivityTable::from_json(&json, Some("synthetic")),
            Err(Error::StaleCalibration { .. })
        ));
    }

    #[test]
    fn negative_and_malformed_rejected() {
        let t = table();
        let mut v: serde_json::Value = serde_json::from_str(&t.to_json()).unwrap();
        v["scores"][1][3] = serde_json::json!(-0.5);
        assert!(matches!(
            SensitivityTable::from_json(&v.to_string(), None),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            SensitivityTable::from_json("{\"format_version\":1}", None),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            SensitivityTable::from_json("not json", None),
            Err(Error::Format(_))
        ));
        let mut v: serde_json::Value = serde_json::from_str(&t.to_json()).unwrap();
        v["configs"][2]["id"] = serde_json::json!(7);
        assert!(matches!(
            SensitivityTable::from_json(&v.to_string(), None),
            Err(Error::Format(_))
        ));
        let mut v: serde_json::Value = serde_json::from_str(&t.to_json()).unwrap();
        v["format_version"] = serde_json::json!(99);
        assert!(matches!(
            SensitivityTable::from_json(&v.to_string(), None),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            load_table(Path::new("/nonexistent/t.json"), None),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn json_layout() {
        let v: serde_json::Value = serde_json::from_str(&table().to_json()).unwrap();
        assert_eq!(v["format_version"], 1);
        assert_eq!(v["metric"], "l2_proxy");
        assert_eq!(v["scorer"], "random_perm");
        assert_eq!(v["configs"].as_array().unwrap().len(), 10);
        assert_eq!(v["scores"].as_array().unwrap().len(), 3);
        assert_eq!(
            v["configs"][9],
            serde_json::json!({"id": 53, "keep": 1.0, "k_bits": 16, "v_bits": 16})
        );
    }

    #[test]
    fn select_reorders_columns() {
        let full_rows = vec![(0..54).map(|i| if i == 53 { 0.0 } else { i as f64 }).collect()];
        let t = SensitivityTable::from_scores(ConfigSpace::full(), full_rows).unwrap();
        let s = t.select(&ConfigSpace::named(SpaceKind::Calib11)).unwrap();
        assert_eq!(s.space().len(), 11);
        for (i, c) in s.space().configs().iter().enumerate() {
            assert_eq!(s.score(0, i), t.score_of(0, c).unwrap());
        }
        assert!(matches!(s.select(&ConfigSpace::full()), Err(Error::Input(_))));
    }

    #[test]
    fn csv_rows() {
        let mut buf = Vec::new();
        table().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "layer,config_id,keep,k_bits,v_bits,score");
        assert_eq!(lines.len(), 1 + 3 * 10);
        assert!(lines[10].starts_with("0,53,1,16,16,0"));
    }

    #[test]
    fn nonzero_identity_rejected() {
        let space = ConfigSpace::named(SpaceKind::Table2);
        let mut row = vec![1.0; space.len()];
        row[space.identity_index()] = 0.01;
        assert!(SensitivityTable::from_scores(space, vec![row]).is_err());
    }
}
