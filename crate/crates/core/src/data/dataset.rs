use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{csv_error, WeightedGraph};
use crate::math::Tensor2;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const GRAPH_FILE: &str = "graph.csv";

/// One ROI-summarized contrast map.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub class_id: u32,
    pub subject_id: String,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: u32,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Manifest {
    pub roi_count: usize,
    pub classes: Vec<ClassInfo>,
    pub samples: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    roi_count: usize,
    classes: Vec<ClassInfo>,
    samples: Vec<Sample>,
    by_class: BTreeMap<u32, Vec<usize>>,
    graph: Option<WeightedGraph>,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.roi_count == other.roi_count
            && self.classes == other.classes
            && self.samples == other.samples
            && self.graph == other.graph
    }
}

impl Dataset {
    pub fn new(roi_count: usize, classes: Vec<ClassInfo>, samples: Vec<Sample>) -> Result<Self> {
        let mut by_class: BTreeMap<u32, Vec<usize>> = classes.iter().map(|c| (c.id, Vec::new())).collect();
        if by_class.len() != classes.len() {
            return Err(Error::InvalidArgument("duplicate class id in class table".into()));
        }
        for (idx, s) in samples.iter().enumerate() {
            if s.features.len() != roi_count {
                return Err(Error::InvalidArgument(format!(
                    "sample {} has {} features, expected {roi_count}",
                    s.sample_id,
                    s.features.len()
                )));
            }
            if !s.features.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("features of sample {}", s.sample_id)));
            }
            by_class
                .get_mut(&s.class_id)
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("sample {} has unknown class {}", s.sample_id, s.class_id))
                })?
                .push(idx);
        }
        if let Some((id, _)) = by_class.iter().find(|(_, v)| v.is_empty()) {
            return Err(Error::InsufficientData(format!("class {id} has no samples")));
        }
        Ok(Self {
            roi_count,
            classes,
            samples,
            by_class,
            graph: None,
        })
    }

    pub fn with_graph(mut self, graph: WeightedGraph) -> Result<Self> {
        if graph.node_count() != self.roi_count {
            return Err(Error::InvalidArgument(format!(
                "graph has {} nodes but dataset has {} ROIs",
                graph.node_count(),
                self.roi_count
            )));
        }
        self.graph = Some(graph);
        Ok(self)
    }

    pub fn roi_count(&self) -> usize {
        self.roi_count
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.by_class.keys().copied().collect()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn graph(&self) -> Option<&WeightedGraph> {
        self.graph.as_ref()
    }

    /// Sample indices of one class (empty for unknown ids).
    pub fn indices_of(&self, class_id: u32) -> &[usize] {
        self.by_class.get(&class_id).map_or(&[], Vec::as_slice)
    }

    pub fn class_count(&self, class_id: u32) -> usize {
        self.indices_of(class_id).len()
    }

    /// All sample indices belonging to the given classes, in class order.
    pub fn indices_of_classes(&self, class_ids: &[u32]) -> Vec<usize> {
        class_ids.iter().flat_map(|&c| self.indices_of(c).iter().copied()).collect()
    }

    /// Feature rows of the given samples as a matrix.
    pub fn features(&self, indices: &[usize]) -> Tensor2 {
        let mut data = Vec::with_capacity(indices.len() * self.roi_count);
        for &i in indices {
            data.extend_from_slice(&self.samples[i].features);
        }
        Tensor2::new(indices.len(), self.roi_count, data).expect("feature rows have roi_count entries")
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        if text.trim().is_empty() {
            return Err(Error::format(manifest_path, "empty manifest"));
        }
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(manifest_path, e.to_string()))?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let samples_path = base.join(&manifest.samples);
        let samples = read_samples(&samples_path, manifest.roi_count)?;
        let known: BTreeMap<u32, ()> = manifest.classes.iter().map(|c| (c.id, ())).collect();
        if let Some(s) = samples.iter().find(|s| !known.contains_key(&s.class_id)) {
            return Err(Error::format(
                &samples_path,
                format!("sample {} references unknown class {}", s.sample_id, s.class_id),
            ));
        }
        let mut ds = Self::new(manifest.roi_count, manifest.classes, samples)
            .map_err(|e| Error::format(&samples_path, e.to_string()))?;
        if let Some(g) = &manifest.graph {
            let graph = WeightedGraph::read_csv(&base.join(g), manifest.roi_count)?;
            ds = ds.with_graph(graph)?;
        }
        Ok(ds)
    }

    /// Writes `manifest.json`, `samples.csv` and (if present) `graph.csv`
    /// into `dir`; returns the manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            roi_count: self.roi_count,
            classes: self.classes.clone(),
            samples: SAMPLES_FILE.into(),
            graph: self.graph.as_ref().map(|_| GRAPH_FILE.into()),
        };
        write_samples(&dir.join(SAMPLES_FILE), self.roi_count, &self.samples)?;
        if let Some(g) = &self.graph {
            g.write_csv(&dir.join(GRAPH_FILE))?;
        }
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn read_samples(path: &Path, roi_count: usize) -> Result<Vec<Sample>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let headers = reader.headers().map_err(|e| csv_error(path, &e))?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::format(path, "empty samples file"));
    }
    let expected_fixed = ["sample_id", "class_id", "subject_id"];
    if headers.len() != 3 + roi_count || headers.iter().take(3).ne(expected_fixed) {
        return Err(Error::format(
            path,
            format!(
                "expected header sample_id,class_id,subject_id,f0..f{} ({} columns), got {} columns",
                roi_count.saturating_sub(1),
                3 + roi_count,
                headers.len()
            ),
        ));
    }
    let mut samples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, &e))?;
        let line = record.position().map_or(0, |p| p.line());
        let parse_err = |m: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: m,
        };
        let sample_id = record[0].to_string();
        if record.len() != 3 + roi_count {
            return Err(parse_err(format!(
                "sample {sample_id} has {} features, expected {roi_count}",
                record.len().saturating_sub(3)
            )));
        }
        let class_id = record[1]
            .trim()
            .parse()
            .map_err(|e| parse_err(format!("class_id: {e}")))?;
        let features = record
            .iter()
            .skip(3)
            .enumerate()
            .map(|(k, f)| {
                let v: f64 = f
                    .trim()
                    .parse()
                    .map_err(|e| parse_err(format!("sample {sample_id} feature f{k}: {e}")))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(parse_err(format!("sample {sample_id} feature f{k} is not finite")))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        samples.push(Sample {
            sample_id,
            class_id,
            subject_id: record[2].to_string(),
            features,
        });
    }
    if samples.is_empty() {
        return Err(Error::format(path, "no samples"));
    }
    Ok(samples)
}

fn write_samples(path: &Path, roi_count: usize, samples: &[Sample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let io = |e: csv::Error| Error::format(path, e.to_string());
    let mut header = vec!["sample_id".to_string(), "class_id".into(), "subject_id".into()];
    header.extend((0..roi_count).map(|k| format!("f{k}")));
    w.write_record(&header).map_err(io)?;
    let mut row = Vec::with_capacity(3 + roi_count);
    for s in samples {
        row.clear();
        row.push(s.sample_id.clone());
        row.push(s.class_id.to_string());
        row.push(s.subject_id.clone());
        // `{}` on f64 prints the shortest string that parses back bit-exactly
        row.extend(s.features.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let classes = vec![
            ClassInfo { id: 0, name: "left hand".into() },
            ClassInfo { id: 1, name: "audio sentence".into() },
        ];
        let samples = vec![
            Sample { sample_id: "a".into(), class_id: 0, subject_id: "sub-01".into(), features: vec![0.1, -2.5e-9] },
            Sample { sample_id: "b".into(), class_id: 1, subject_id: "sub-02".into(), features: vec![1.0 / 3.0, 7.0] },
        ];
        Dataset::new(2, classes, samples).unwrap()
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        let manifest = ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(&manifest).unwrap(), ds);
    }

    #[test]
    fn empty_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        fs::write(&path, "").unwrap();
        assert!(Dataset::load(&path).is_err());
    }

    #[test]
    fn empty_samples_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny().save(dir.path()).unwrap();
        fs::write(dir.path().join(SAMPLES_FILE), "").unwrap();
        assert!(Dataset::load(&manifest).is_err());
        fs::write(dir.path().join(SAMPLES_FILE), "sample_id,class_id,subject_id,f0,f1\n").unwrap();
        assert!(Dataset::load(&manifest).is_err());
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny().save(dir.path()).unwrap();
        fs::write(
            dir.path().join(SAMPLES_FILE),
            "sample_id,class_id,subject_id,f0,f1\na,0,s,1.0,2.0\nb,1,s,oops,2.0\n",
        )
        .unwrap();
        let err = Dataset::load(&manifest).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn short_row_names_sample() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny().save(dir.path()).unwrap();
        fs::write(
            dir.path().join(SAMPLES_FILE),
            "sample_id,class_id,subject_id,f0,f1\nshorty,0,s,1.0\n",
        )
        .unwrap();
        let err = Dataset::load(&manifest).unwrap_err().to_string();
        assert!(err.contains("shorty"), "{err}");
    }

    #[test]
    fn class_without_samples_rejected() {
        let classes = vec![ClassInfo { id: 0, name: "x".into() }, ClassInfo { id: 5, name: "y".into() }];
        let samples = vec![Sample { sample_id: "a".into(), class_id: 0, subject_id: String::new(), features: vec![0.0] }];
        assert!(Dataset::new(1, classes, samples).is_err());
    }
}
