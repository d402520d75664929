//! Datasets: a synthetic benchmark with controllable class confusability,
//! CSV ingestion of precomputed feature vectors, and round scheduling.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::engine::RoundSpec;
use crate::error::{input_err, Error, Result};
use crate::matrix::Matrix;
use crate::metrics::MetaClassMap;
use crate::report::fmt_f64;
use crate::rng;

pub type ClassId = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    pub class_id: ClassId,
    pub meta_class_id: u32,
}

/// Samples sharing one feature width.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleSet {
    dim: usize,
    samples: Vec<LabeledSample>,
}

impl SampleSet {
    pub fn new(dim: usize, samples: Vec<LabeledSample>) -> Result<Self> {
        if let Some((i, s)) = samples
            .iter()
            .enumerate()
            .find(|(_, s)| s.features.len() != dim)
        {
            return Err(Error::Schema(format!(
                "sample {i} has {} features, expected {dim}",
                s.features.len()
            )));
        }
        Ok(Self { dim, samples })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn classes(&self) -> BTreeSet<ClassId> {
        self.samples.iter().map(|s| s.class_id).collect()
    }

    /// Feature rows grouped by class, in file/generation order.
    pub fn by_class(&self) -> BTreeMap<ClassId, Matrix> {
        let mut rows: BTreeMap<ClassId, Vec<f64>> = BTreeMap::new();
        for s in &self.samples {
            rows.entry(s.class_id)
                .or_default()
                .extend_from_slice(&s.features);
        }
        rows.into_iter()
            .map(|(c, data)| {
                let n = data.len() / self.dim.max(1);
                (
                    c,
                    Matrix::from_vec(n, self.dim, data).expect("uniform width"),
                )
            })
            .collect()
    }

    /// Class → meta-class map; every class must carry a single meta id.
    pub fn meta_map(&self) -> Result<MetaClassMap> {
        let mut map = BTreeMap::new();
        for s in &self.samples {
            if let Some(&prev) = map.get(&s.class_id) {
                if prev != s.meta_class_id {
                    return Err(Error::Schema(format!(
                        "class {} appears with meta-classes {prev} and {}",
                        s.class_id, s.meta_class_id
                    )));
                }
            }
            map.insert(s.class_id, s.meta_class_id);
        }
        Ok(MetaClassMap::new(map))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: SampleSet,
    pub test: SampleSet,
}

impl Dataset {
    pub fn new(train: SampleSet, test: SampleSet) -> Result<Self> {
        if train.dim() != test.dim() && !test.is_empty() {
            return Err(Error::Schema(format!(
                "train width {} differs from test width {}",
                train.dim(),
                test.dim()
            )));
        }
        Ok(Self { train, test })
    }

    pub fn dim(&self) -> usize {
        self.train.dim()
    }

    /// Meta-class map covering both splits.
    pub fn meta_map(&self) -> Result<MetaClassMap> {
        let mut merged = self.train.meta_map()?.into_inner();
        for (c, m) in self.test.meta_map()?.into_inner() {
            match merged.get(&c) {
                Some(&prev) if prev != m => {
                    return Err(Error::Schema(format!(
                        "class {c} has meta-class {prev} in train but {m} in test"
                    )))
                }
                _ => {
                    merged.insert(c, m);
                }
            }
        }
        Ok(MetaClassMap::new(merged))
    }
}

/// Parameters of the synthetic benchmark.
///
/// `meta_classes × classes_per_meta` classes sit in tight groups (centres
/// within `intra_spread` of their group centre); `background_classes` more
/// are placed independently, each forming its own meta-class. Group and
/// background centres are uniform in the origin-centred cube of side
/// `inter_spread`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub meta_classes: usize,
    pub classes_per_meta: usize,
    #[serde(default)]
    pub background_classes: usize,
    pub dim: usize,
    pub intra_spread: f64,
    pub inter_spread: f64,
    pub within_std: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// The confusable benchmark: 2 groups of 5 similar classes plus 10
    /// background classes in 16 dimensions.
    fn default() -> Self {
        Self {
            meta_classes: 2,
            classes_per_meta: 5,
            background_classes: 10,
            dim: 16,
            intra_spread: 1.0,
            inter_spread: 4.0,
            within_std: 0.25,
            train_per_class: 100,
            test_per_class: 50,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn num_classes(&self) -> usize {
        self.meta_classes * self.classes_per_meta + self.background_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes() < 2 {
            return Err(input_err!("synthetic benchmark needs at least 2 classes"));
        }
        if self.dim == 0 {
            return Err(input_err!("dim must be positive"));
        }
        if !(self.intra_spread > 0.0 && self.inter_spread > self.intra_spread) {
            return Err(input_err!(
                "need inter_spread > intra_spread > 0, got {} and {}",
                self.inter_spread,
                self.intra_spread
            ));
        }
        if !(self.within_std > 0.0 && self.within_std.is_finite()) {
            return Err(input_err!("within_std must be positive"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(input_err!("train/test counts per class must be positive"));
        }
        Ok(())
    }

    /// Class centres and meta ids, in class-id order.
    pub fn class_layout(&self) -> Result<Vec<(Vec<f64>, u32)>> {
        self.validate()?;
        let mut rng = rng::seeded(rng::derive_seed(self.seed, &[rng::tag("centres")]));
        let d = self.dim;
        let cube = |rng: &mut rng::Rng| -> Vec<f64> {
            let half = self.inter_spread / 2.0;
            (0..d).map(|_| rng.gen_range(-half..half)).collect()
        };
        let gauss = Normal::new(0.0, 1.0).expect("unit normal");
        let mut layout = Vec::with_capacity(self.num_classes());
        for g in 0..self.meta_classes {
            let centre = cube(&mut rng);
            for _ in 0..self.classes_per_meta {
                let mut dir: Vec<f64> = (0..d).map(|_| gauss.sample(&mut rng)).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                let radius = self.intra_spread * rng.gen_range(0.5..=1.0);
                dir.iter_mut().for_each(|v| *v *= radius / norm);
                let c = centre.iter().zip(&dir).map(|(a, b)| a + b).collect();
                layout.push((c, g as u32));
            }
        }
        for j in 0..self.background_classes {
            layout.push((cube(&mut rng), (self.meta_classes + j) as u32));
        }
        Ok(layout)
    }
}

/// Draws the synthetic dataset. Deterministic in `spec.seed`.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    let layout = spec.class_layout()?;
    let noise = Normal::new(0.0, spec.within_std).map_err(|e| input_err!("bad within_std: {e}"))?;
    let draw = |split: &str, per_class: usize| -> Result<SampleSet> {
        let mut rng = rng::seeded(rng::derive_seed(spec.seed, &[rng::tag(split)]));
        let mut samples = Vec::with_capacity(per_class * layout.len());
        for (class, (centre, meta)) in layout.iter().enumerate() {
            for _ in 0..per_class {
                samples.push(LabeledSample {
                    features: centre.iter().map(|c| c + noise.sample(&mut rng)).collect(),
                    class_id: class as ClassId,
                    meta_class_id: *meta,
                });
            }
        }
        SampleSet::new(spec.dim, samples)
    };
    Dataset::new(
        draw("train", spec.train_per_class)?,
        draw("test", spec.test_per_class)?,
    )
}

/// Reads `f0,…,f{d-1},label,meta` rows.
pub fn load_csv(path: impl AsRef<Path>) -> Result<SampleSet> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Schema(format!("{}: {other:?}", path.display())),
        })?;
    let header = reader
        .headers()
        .map_err(|e| Error::Schema(format!("{}: unreadable header: {e}", path.display())))?
        .clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 3 || cols.iter().all(|c| c.is_empty()) {
        return Err(Error::Schema(format!(
            "{}: missing header `f0,...,label,meta`",
            path.display()
        )));
    }
    let d = cols.len() - 2;
    for (i, c) in cols[..d].iter().enumerate() {
        if *c != format!("f{i}") {
            return Err(Error::Schema(format!(
                "header column {i} is `{c}`, expected `f{i}`"
            )));
        }
    }
    if cols[d] != "label" || cols[d + 1] != "meta" {
        return Err(Error::Schema(
            "header must end with `label,meta`".to_string(),
        ));
    }
    let mut samples = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            match e.kind() {
                csv::ErrorKind::UnequalLengths { .. } => {
                    Error::Schema(format!("line {line}: row width differs from header"))
                }
                _ => Error::Parse {
                    line,
                    msg: e.to_string(),
                },
            }
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let features = rec
            .iter()
            .take(d)
            .enumerate()
            .map(|(i, v)| {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| Error::Parse {
                        line,
                        msg: format!("column f{i}: `{v}` is not a finite number"),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let id = |col: usize, name: &str| -> Result<u32> {
            rec[col].parse::<u32>().map_err(|_| Error::Parse {
                line,
                msg: format!(
                    "column {name}: `{}` is not a non-negative integer",
                    &rec[col]
                ),
            })
        };
        samples.push(LabeledSample {
            features,
            class_id: id(d, "label")?,
            meta_class_id: id(d + 1, "meta")?,
        });
    }
    SampleSet::new(d, samples)
}

/// Writes a sample set in the format read by [`load_csv`].
pub fn write_csv(set: &SampleSet, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = (0..set.dim())
        .map(|i| format!("f{i}"))
        .chain(["label".to_string(), "meta".to_string()])
        .collect();
    writeln!(out, "{}", header.join(","))?;
    for s in set.samples() {
        let mut row: Vec<String> = s.features.iter().map(|&v| fmt_f64(v)).collect();
        row.push(s.class_id.to_string());
        row.push(s.meta_class_id.to_string());
        writeln!(out, "{}", row.join(","))?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulePolicy {
    /// Ascending class id, chunked.
    IdOrder,
    /// Members of each meta-class dealt to distinct rounds.
    SplitSimilar,
}

/// Class lists per round. Every class appears exactly once.
pub fn class_order(
    classes: &BTreeSet<ClassId>,
    meta: &MetaClassMap,
    classes_per_round: usize,
    policy: SchedulePolicy,
) -> Result<Vec<Vec<ClassId>>> {
    if classes_per_round == 0 {
        return Err(input_err!("classes_per_round must be >= 1"));
    }
    let all: Vec<ClassId> = classes.iter().copied().collect();
    match policy {
        SchedulePolicy::IdOrder => Ok(all.chunks(classes_per_round).map(<[_]>::to_vec).collect()),
        SchedulePolicy::SplitSimilar => {
            let n_rounds = all.len().div_ceil(classes_per_round);
            let mut groups: BTreeMap<u32, Vec<ClassId>> = BTreeMap::new();
            for &c in &all {
                groups.entry(meta.get(c)?).or_default().push(c);
            }
            let mut groups: Vec<(u32, Vec<ClassId>)> = groups.into_iter().collect();
            // larger groups are dealt first so their members spread widest
            groups.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
            let mut rounds: Vec<Vec<ClassId>> = vec![Vec::new(); n_rounds];
            let mut cursor = 0usize;
            for c in groups.into_iter().flat_map(|(_, members)| members) {
                while rounds[cursor % n_rounds].len() == classes_per_round {
                    cursor += 1;
                }
                rounds[cursor % n_rounds].push(c);
                cursor += 1;
            }
            rounds.iter_mut().for_each(|r| r.sort_unstable());
            Ok(rounds)
        }
    }
}

/// Splits the training set into rounds of new classes.
pub fn schedule_rounds(
    train: &SampleSet,
    meta: &MetaClassMap,
    classes_per_round: usize,
    policy: SchedulePolicy,
) -> Result<Vec<RoundSpec>> {
    let mut by_class = train.by_class();
    let order = class_order(&train.classes(), meta, classes_per_round, policy)?;
    order
        .into_iter()
        .enumerate()
        .map(|(index, classes)| {
            let data = classes
                .iter()
                .map(|c| (*c, by_class.remove(c).expect("class present in train")))
                .collect();
            RoundSpec::new(index, classes, data)
        })
        .collect()
}
