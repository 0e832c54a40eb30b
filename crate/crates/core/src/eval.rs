//! Dice tables, aggregates and significance tests over held-out cases.

use std::collections::BTreeMap;
use std::path::Path;

use crate::collection::{ClassRef, CollectionManifest, Grid3, Split};
use crate::trainer::Segmenter;
use crate::{Error, Result};

/// Threshold below which a class counts as difficult.
pub const DIFFICULT_THRESHOLD: f64 = 75.0;

/// Dice overlap in percent. Two empty masks agree perfectly.
pub fn dice_score(pred: &Grid3<u8>, truth: &Grid3<u8>) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(truth.data()) {
        if a > 1 || b > 1 {
            return Err(Error::Eval("masks must be binary".into()));
        }
        p += a as usize;
        g += b as usize;
        both += (a & b) as usize;
    }
    if p + g == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * both as f64 / (p + g) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub class: ClassRef,
    pub case_id: String,
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMean {
    pub class: ClassRef,
    pub mean_dice: f64,
    pub n_cases: usize,
}

/// One dice value per (class, case).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
}

impl EvalTable {
    pub fn push(&mut self, class: ClassRef, case_id: impl Into<String>, dice: f64) {
        self.rows.push(EvalRow {
            class,
            case_id: case_id.into(),
            dice,
        });
    }

    /// Per-class means ordered by (dataset, local index).
    pub fn class_means(&self) -> Vec<ClassMean> {
        let mut acc: BTreeMap<(u32, u32), (ClassRef, f64, usize)> = BTreeMap::new();
        for r in &self.rows {
            let e = acc.entry(r.class.key()).or_insert_with(|| (r.class.clone(), 0.0, 0));
            e.1 += r.dice;
            e.2 += 1;
        }
        acc.into_values()
            .map(|(class, sum, n)| ClassMean {
                class,
                mean_dice: sum / n as f64,
                n_cases: n,
            })
            .collect()
    }

    /// Mean of each dataset's class means.
    pub fn dataset_means(&self) -> Vec<(u32, f64)> {
        let mut acc: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
        for m in self.class_means() {
            acc.entry(m.class.dataset_id).or_default().push(m.mean_dice);
        }
        acc.into_iter().map(|(d, v)| (d, mean(&v))).collect()
    }

    /// Scores of one class keyed by case id, for pairing two tables.
    pub fn class_scores(&self, key: (u32, u32)) -> BTreeMap<String, f64> {
        self.rows
            .iter()
            .filter(|r| r.class.key() == key)
            .map(|r| (r.case_id.clone(), r.dice))
            .collect()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Scores every annotated class of every case in `split` against the case's
/// own masks. Classes are matched to model outputs by (dataset, local index).
pub fn evaluate<S>(model: &S, manifest: &CollectionManifest, split: Split) -> Result<EvalTable>
where
    S: Segmenter + Sync + ?Sized,
{
    let cases = manifest.case_indices(split);
    if cases.is_empty() {
        return Err(Error::Eval("no cases in the requested split".into()));
    }
    let outputs: BTreeMap<(u32, u32), usize> = model.classes().iter().enumerate().map(|(i, c)| (c.key(), i)).collect();
    for c in &manifest.global_classes {
        if !outputs.contains_key(&c.key()) {
            return Err(Error::Eval(format!(
                "model has no output for class {} of dataset {}",
                c.name, c.dataset_id
            )));
        }
    }

    let score = |index: usize| -> Result<Vec<EvalRow>> {
        let case = manifest.load_case(index)?;
        let pred = model.segment(&case.image)?;
        let ds = manifest
            .dataset(case.dataset_id)
            .ok_or(Error::UnknownDataset(case.dataset_id))?;
        ds.classes
            .iter()
            .zip(&case.masks)
            .map(|(class, truth)| {
                Ok(EvalRow {
                    class: class.clone(),
                    case_id: case.id.clone(),
                    dice: dice_score(&pred[outputs[&class.key()]], truth)?,
                })
            })
            .collect()
    };

    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(cases.len());
    let mut per_case: Vec<Option<Result<Vec<EvalRow>>>> = (0..cases.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let chunk = cases.len().div_ceil(workers);
        for (slots, idx) in per_case.chunks_mut(chunk).zip(cases.chunks(chunk)) {
            let score = &score;
            s.spawn(move || {
                for (slot, &i) in slots.iter_mut().zip(idx) {
                    *slot = Some(score(i));
                }
            });
        }
    });
    let mut table = EvalTable::default();
    for r in per_case {
        table.rows.extend(r.expect("every case is scored")?);
    }
    Ok(table)
}

/// Which classes a summary row averages over.
#[derive(Clone, Debug)]
pub enum GroupRule {
    /// Mean over all class means.
    All,
    /// Mean over dataset means.
    DatasetAverage,
    /// Classes whose mean in `reference` is strictly below `threshold`.
    Difficult {
        threshold: f64,
        reference: Option<EvalTable>,
    },
    /// Classes carrying a tag.
    Tag(String),
    /// Classes of one dataset.
    Dataset(u32),
}

impl GroupRule {
    pub fn difficult(reference: EvalTable) -> Self {
        GroupRule::Difficult {
            threshold: DIFFICULT_THRESHOLD,
            reference: Some(reference),
        }
    }

    pub fn label(&self) -> String {
        match self {
            GroupRule::All => "all_classes".into(),
            GroupRule::DatasetAverage => "dataset_average".into(),
            GroupRule::Difficult { threshold, .. } => format!("difficult_below_{threshold}"),
            GroupRule::Tag(t) => format!("tag:{t}"),
            GroupRule::Dataset(d) => format!("dataset:{d}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupSummary {
    pub group: String,
    /// `None` when the group is empty.
    pub mean_dice: Option<f64>,
    pub n_classes: usize,
}

pub fn aggregate(table: &EvalTable, rule: &GroupRule) -> Result<GroupSummary> {
    let means = table.class_means();
    let pick = |keep: &dyn Fn(&ClassMean) -> bool| {
        let v: Vec<f64> = means.iter().filter(|m| keep(m)).map(|m| m.mean_dice).collect();
        (v.len(), (!v.is_empty()).then(|| mean(&v)))
    };
    let (n_classes, mean_dice) = match rule {
        GroupRule::All => pick(&|_| true),
        GroupRule::DatasetAverage => {
            let d: Vec<f64> = table.dataset_means().into_iter().map(|(_, m)| m).collect();
            (means.len(), (!d.is_empty()).then(|| mean(&d)))
        }
        GroupRule::Difficult { threshold, reference } => {
            let reference = reference
                .as_ref()
                .ok_or_else(|| Error::Eval("difficult-class rule needs reference results".into()))?;
            let hard: Vec<(u32, u32)> = reference
                .class_means()
                .into_iter()
                .filter(|m| m.mean_dice < *threshold)
                .map(|m| m.class.key())
                .collect();
            pick(&|m| hard.contains(&m.class.key()))
        }
        GroupRule::Tag(t) => pick(&|m| m.class.has_tag(t)),
        GroupRule::Dataset(d) => pick(&|m| m.class.dataset_id == *d),
    };
    Ok(GroupSummary {
        group: rule.label(),
        mean_dice,
        n_classes,
    })
}

/// Regularized incomplete beta function I_x(a, b).
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0, "shape parameters must be positive");
    assert!((0.0..=1.0).contains(&x), "x must lie in [0, 1]");
    if x == 0.0 || x == 1.0 {
        return x;
    }
    let ln_front = libm::lgamma(a + b) - libm::lgamma(a) - libm::lgamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    // The continued fraction converges fast on this side of the mean.
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_fraction(b, a, 1.0 - x) / b
    }
}

/// Continued fraction for the incomplete beta, modified Lentz evaluation.
fn beta_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let mut c = 1.0;
    let mut d = 1.0 - (a + b) * x / (a + 1.0);
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let even = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
        for coef in [even, -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0))] {
            d = 1.0 + coef * d;
            if d.abs() < TINY {
                d = TINY;
            }
            c = 1.0 + coef / c;
            if c.abs() < TINY {
                c = TINY;
            }
            d = 1.0 / d;
            h *= d * c;
        }
        if (d * c - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// CDF of Student's t distribution with `df` degrees of freedom.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return if t > 0.0 { 1.0 } else { 0.0 };
    }
    let tail = 0.5 * regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
    if t > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// p-value of the one-sided paired t-test for mean(a - b) > 0.
pub fn paired_one_sided_t_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Eval(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Eval("paired t-test needs at least two pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let m = mean(&d);
    let var = d.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Ok(match m.partial_cmp(&0.0) {
            Some(std::cmp::Ordering::Greater) => 0.0,
            Some(std::cmp::Ordering::Less) => 1.0,
            _ => 0.5,
        });
    }
    let t = m / (var.sqrt() / (n as f64).sqrt());
    Ok(1.0 - student_t_cdf(t, (n - 1) as f64))
}

fn fixed(v: f64) -> String {
    format!("{v:.6}")
}

fn writer(dir: &Path, name: &str, header: &[&str]) -> Result<csv::Writer<std::fs::File>> {
    let path = dir.join(name);
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(header)?;
    Ok(w)
}

/// Writes `per_class.csv`, `per_dataset.csv`, `groups.csv` and
/// `per_case.csv` into `dir`.
pub fn write_report(table: &EvalTable, groups: &[GroupSummary], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut w = writer(
        dir,
        "per_class.csv",
        &["dataset_id", "class_name", "mean_dice", "n_cases"],
    )?;
    for m in table.class_means() {
        w.write_record([
            m.class.dataset_id.to_string(),
            m.class.name.clone(),
            fixed(m.mean_dice),
            m.n_cases.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(dir.join("per_class.csv"), e))?;

    let mut w = writer(dir, "per_dataset.csv", &["dataset_id", "mean_dice"])?;
    for (d, m) in table.dataset_means() {
        w.write_record([d.to_string(), fixed(m)])?;
    }
    w.flush().map_err(|e| Error::io(dir.join("per_dataset.csv"), e))?;

    let mut w = writer(dir, "groups.csv", &["group", "mean_dice", "n_classes"])?;
    for g in groups {
        w.write_record([
            g.group.clone(),
            g.mean_dice.map(fixed).unwrap_or_default(),
            g.n_classes.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(dir.join("groups.csv"), e))?;

    let mut w = writer(
        dir,
        "per_case.csv",
        &["dataset_id", "class_index", "class_name", "case_id", "dice"],
    )?;
    let mut rows: Vec<&EvalRow> = table.rows.iter().collect();
    rows.sort_by(|a, b| (a.class.key(), &a.case_id).cmp(&(b.class.key(), &b.case_id)));
    for r in rows {
        w.write_record([
            r.class.dataset_id.to_string(),
            r.class.local_index.to_string(),
            r.class.name.clone(),
            r.case_id.clone(),
            fixed(r.dice),
        ])?;
    }
    w.flush().map_err(|e| Error::io(dir.join("per_case.csv"), e))?;
    Ok(())
}

#[derive(serde::Deserialize)]
struct CaseRecord {
    dataset_id: u32,
    class_index: u32,
    class_name: String,
    case_id: String,
    dice: f64,
}

/// Reads a `per_case.csv` written by [`write_report`] back into a table,
/// e.g. as the reference for [`GroupRule::Difficult`]. Tags are not stored
/// and come back empty.
pub fn read_per_case(path: impl AsRef<Path>) -> Result<EvalTable> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut table = EvalTable::default();
    for rec in csv::Reader::from_reader(file).deserialize() {
        let r: CaseRecord = rec?;
        table.push(
            ClassRef {
                dataset_id: r.dataset_id,
                local_index: r.class_index,
                name: r.class_name,
                group_tags: Default::default(),
                structure: None,
            },
            r.case_id,
            r.dice,
        );
    }
    Ok(table)
}
