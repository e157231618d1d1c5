//! Teacher posteriors: a text manifest for externally computed vision-model
//! outputs, and a parametric synthetic teacher for desk-scale experiments.
//!
//! Manifest format, one record per line:
//!
//! ```text
//! # teacher: googlenet
//! 17<TAB>0.9 0.05 0.05
//! ```
//!
//! Lines starting with `#` are comments; a `# teacher: <name>` comment names
//! the table. Posteriors are stored as given; softening happens in the losses.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::losses::SIMPLEX_TOL;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorTable {
    pub teacher_name: String,
    num_classes: usize,
    rows: BTreeMap<u32, Vec<f64>>,
}

fn validate_row(p: &[f64]) -> std::result::Result<(), String> {
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err("negative or non-finite probability".into());
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(format!("probabilities sum to {sum}"));
    }
    Ok(())
}

impl PosteriorTable {
    pub fn new(teacher_name: impl Into<String>, num_classes: usize) -> Self {
        Self {
            teacher_name: teacher_name.into(),
            num_classes,
            rows: BTreeMap::new(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn insert(&mut self, image_id: u32, posterior: Vec<f64>) -> Result<()> {
        if posterior.len() != self.num_classes {
            return Err(Error::shape(format!(
                "posterior for image {image_id} has {} entries, table has {} classes",
                posterior.len(),
                self.num_classes
            )));
        }
        validate_row(&posterior)
            .map_err(|e| Error::Validation(format!("image {image_id}: {e}")))?;
        self.rows.insert(image_id, posterior);
        Ok(())
    }

    pub fn get(&self, image_id: u32) -> Option<&[f64]> {
        self.rows.get(&image_id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &[f64])> {
        self.rows.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    /// Keeps the classes listed in `keep` (old ids, in new-id order) and
    /// renormalizes each row over them. Rows with no mass left are dropped.
    pub fn restrict(&self, keep: &[usize]) -> Result<Self> {
        if let Some(&bad) = keep.iter().find(|&&c| c >= self.num_classes) {
            return Err(Error::domain(format!("class {bad} not in table")));
        }
        let mut out = Self::new(self.teacher_name.clone(), keep.len());
        for (&id, row) in &self.rows {
            let mut sub: Vec<f64> = keep.iter().map(|&c| row[c]).collect();
            let sum: f64 = sub.iter().sum();
            if sum <= 0.0 {
                continue;
            }
            sub.iter_mut().for_each(|v| *v /= sum);
            out.rows.insert(id, sub);
        }
        Ok(out)
    }

    pub fn to_manifest(&self) -> String {
        let mut s = format!("# teacher: {}\n", self.teacher_name);
        for (id, row) in &self.rows {
            write!(s, "{id}\t").unwrap();
            for (k, v) in row.iter().enumerate() {
                if k > 0 {
                    s.push(' ');
                }
                // `{}` prints the shortest representation that parses back exactly.
                write!(s, "{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn parse_manifest(text: &str) -> Result<Self> {
        let mut name = String::from("unnamed");
        let mut num_classes = None;
        let mut rows = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(n) = comment.trim().strip_prefix("teacher:") {
                    name = n.trim().to_string();
                }
                continue;
            }
            let parse_err = |msg: String| Error::Parse { line: line_no, msg };
            let (id, probs) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected '<image_id>\\t<probabilities>'".into()))?;
            let id: u32 = id
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("bad image id {id:?}: {e}")))?;
            let row = probs
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>()
                        .map_err(|e| parse_err(format!("bad probability {tok:?}: {e}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            match num_classes {
                None => num_classes = Some(row.len()),
                Some(n) if n != row.len() => {
                    return Err(parse_err(format!("expected {n} probabilities, found {}", row.len())))
                }
                _ => {}
            }
            validate_row(&row).map_err(|e| {
                Error::Validation(format!("line {line_no} (image {id}): {e}"))
            })?;
            if rows.insert(id, row).is_some() {
                return Err(parse_err(format!("duplicate image id {id}")));
            }
        }
        let num_classes = num_classes.ok_or_else(|| Error::Parse {
            line: 0,
            msg: "manifest has no records".into(),
        })?;
        if num_classes == 0 {
            return Err(Error::Parse {
                line: 0,
                msg: "records have no probabilities".into(),
            });
        }
        Ok(Self {
            teacher_name: name,
            num_classes,
            rows,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_manifest())?;
        Ok(())
    }
}

pub fn load_posteriors(path: impl AsRef<Path>) -> Result<PosteriorTable> {
    PosteriorTable::parse_manifest(&fs::read_to_string(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticTeacherConfig {
    pub num_classes: usize,
    /// Probability mass on the true class, in `(0, 1]`.
    pub fidelity: f64,
    pub confusion_temperature: f64,
    pub seed: u64,
}

/// A teacher whose off-class mass follows a fixed random class-similarity
/// structure.
#[derive(Debug, Clone)]
pub struct SyntheticTeacher {
    cfg: SyntheticTeacherConfig,
    similarity: Vec<Vec<f64>>,
}

impl SyntheticTeacher {
    pub fn new(cfg: SyntheticTeacherConfig) -> Result<Self> {
        if cfg.num_classes == 0 {
            return Err(Error::domain("teacher needs at least one class"));
        }
        if !(cfg.fidelity > 0.0 && cfg.fidelity <= 1.0) {
            return Err(Error::domain(format!("fidelity must be in (0, 1], got {}", cfg.fidelity)));
        }
        if !(cfg.confusion_temperature > 0.0) {
            return Err(Error::domain("confusion temperature must be positive"));
        }
        let n = cfg.num_classes;
        let mut rng = rng::stream(cfg.seed, "teacher.similarity", &[n as u64]);
        let mut similarity = vec![vec![0.0; n]; n];
        for a in 0..n {
            for b in a + 1..n {
                let s: f64 = StandardNormal.sample(&mut rng);
                similarity[a][b] = s;
                similarity[b][a] = s;
            }
        }
        Ok(Self { cfg, similarity })
    }

    pub fn config(&self) -> &SyntheticTeacherConfig {
        &self.cfg
    }

    pub fn similarity(&self, a: usize, b: usize) -> f64 {
        self.similarity[a][b]
    }

    pub fn posterior(&self, true_class: usize) -> Result<Vec<f64>> {
        let n = self.cfg.num_classes;
        if true_class >= n {
            return Err(Error::domain(format!("class {true_class} out of range for {n} classes")));
        }
        let mut p = vec![0.0; n];
        if n == 1 {
            p[0] = 1.0;
            return Ok(p);
        }
        p[true_class] = self.cfg.fidelity;
        let rest = 1.0 - self.cfg.fidelity;
        if rest > 0.0 {
            let row = &self.similarity[true_class];
            let max = (0..n)
                .filter(|&c| c != true_class)
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = (0..n)
                .map(|c| {
                    if c == true_class {
                        0.0
                    } else {
                        ((row[c] - max) / self.cfg.confusion_temperature).exp()
                    }
                })
                .collect();
            let total: f64 = weights.iter().sum();
            for (c, w) in weights.into_iter().enumerate() {
                if c != true_class {
                    p[c] = rest * w / total;
                }
            }
        }
        Ok(p)
    }

    /// Posterior table for the given `(image_id, class)` pairs.
    pub fn table<I>(&self, images: I) -> Result<PosteriorTable>
    where
        I: IntoIterator<Item = (u32, usize)>,
    {
        let mut table = PosteriorTable::new("synthetic", self.cfg.num_classes);
        for (id, class) in images {
            table.insert(id, self.posterior(class)?)?;
        }
        Ok(table)
    }
}

/// One-shot form of [`SyntheticTeacher::posterior`].
pub fn synthetic_posterior(true_class: usize, cfg: &SyntheticTeacherConfig) -> Result<Vec<f64>> {
    SyntheticTeacher::new(*cfg)?.posterior(true_class)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, fidelity: f64, seed: u64) -> SyntheticTeacherConfig {
        SyntheticTeacherConfig {
            num_classes: n,
            fidelity,
            confusion_temperature: 1.0,
            seed,
        }
    }

    #[test]
    fn manifest_loads() {
        let text = "# teacher: vgg\n# comment\n1\t0.25 0.75\n2\t1 0\n\n";
        let t = PosteriorTable::parse_manifest(text).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.num_classes(), 2);
        assert_eq!(t.teacher_name, "vgg");
        assert_eq!(t.get(1).unwrap(), &[0.25, 0.75]);
    }

    #[test]
    fn bad_sum_names_the_row() {
        let text = "1\t0.5 0.5\n2\t0.4 0.4\n";
        let err = PosteriorTable::parse_manifest(text).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        let msg = err.to_string();
        assert!(msg.contains("line 2") && msg.contains("image 2"), "{msg}");
    }

    #[test]
    fn malformed_rows_report_line() {
        for (text, line) in [
            ("1\t0.5 0.5\nxx\t1 0\n", 2),
            ("1 0.5 0.5\n", 1),
            ("1\t0.5 0.5\n2\t1\n", 2),
            ("1\t0.5 abc\n", 1),
        ] {
            match PosteriorTable::parse_manifest(text) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let teacher = SyntheticTeacher::new(cfg(7, 0.63, 5)).unwrap();
        let table = teacher.table((0..30).map(|i| (i * 3, (i % 7) as usize))).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("post.tsv");
        table.save(&path).unwrap();
        let back = load_posteriors(&path).unwrap();
        assert_eq!(back, table);
    }

    #[test]
    fn synthetic_examples() {
        assert_eq!(synthetic_posterior(2, &cfg(4, 1.0, 0)).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        let p = synthetic_posterior(1, &cfg(4, 0.7, 0)).unwrap();
        assert_eq!(p[1], 0.7);
        let others: f64 = p.iter().enumerate().filter(|&(c, _)| c != 1).map(|(_, v)| v).sum();
        assert!((others - 0.3).abs() < 1e-12);
        assert_eq!(p, synthetic_posterior(1, &cfg(4, 0.7, 0)).unwrap());
    }

    #[test]
    fn synthetic_argmax_is_true_class() {
        for seed in 0..5 {
            for fidelity in [0.51, 0.6, 0.85, 1.0] {
                let teacher = SyntheticTeacher::new(cfg(12, fidelity, seed)).unwrap();
                for c in 0..12 {
                    let p = teacher.posterior(c).unwrap();
                    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                    assert!(p.iter().all(|&v| v >= 0.0));
                    assert_eq!(crate::numerics::argmax(&p), c);
                }
            }
        }
    }

    #[test]
    fn similarity_is_symmetric_and_shapes_off_mass() {
        let teacher = SyntheticTeacher::new(cfg(6, 0.5, 9)).unwrap();
        for a in 0..6 {
            for b in 0..6 {
                assert_eq!(teacher.similarity(a, b), teacher.similarity(b, a));
            }
        }
        let p = teacher.posterior(0).unwrap();
        let most_similar = (1..6)
            .max_by(|&a, &b| teacher.similarity(0, a).total_cmp(&teacher.similarity(0, b)))
            .unwrap();
        let runner_up = (1..6).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
        assert_eq!(most_similar, runner_up);
    }

    #[test]
    fn synthetic_errors() {
        assert!(SyntheticTeacher::new(cfg(3, 0.0, 0)).is_err());
        assert!(SyntheticTeacher::new(cfg(3, 1.1, 0)).is_err());
        assert!(synthetic_posterior(3, &cfg(3, 0.9, 0)).is_err());
    }

    #[test]
    fn restrict_renormalizes() {
        let mut t = PosteriorTable::new("x", 4);
        t.insert(1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        t.insert(2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let r = t.restrict(&[3, 0]).unwrap();
        assert_eq!(r.num_classes(), 2);
        let row = r.get(1).unwrap();
        assert!((row[0] - 0.8).abs() < 1e-12 && (row[1] - 0.2).abs() < 1e-12);
        assert!(r.get(2).is_none());
    }

    #[test]
    fn insert_validates() {
        let mut t = PosteriorTable::new("x", 2);
        assert!(matches!(t.insert(0, vec![0.5, 0.4]), Err(Error::Validation(_))));
        assert!(matches!(t.insert(0, vec![1.0]), Err(Error::Shape(_))));
    }
}
