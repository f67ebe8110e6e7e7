//! One-shot nearest-prototype classification and its evaluation protocols.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use crate::data::{Dataset, ImageTensor};
use crate::error::{Error, Result};
use crate::model::{embed, Vpe};

/// Squared Euclidean distance, accumulated in `f64` in index order.
pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

/// Index of the nearest entry and its squared distance. Ties go to the
/// lowest label. Duplicate labels are allowed here.
pub fn nearest<'a>(query: &[f32], entries: impl IntoIterator<Item = (usize, &'a [f32])>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (label, emb) in entries {
        let d = squared_distance(query, emb);
        best = match best {
            Some((bl, bd)) if bd < d || (bd == d && bl <= label) => Some((bl, bd)),
            _ => Some((label, d)),
        };
    }
    best
}

/// Class label to prototype embedding, ordered by label.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportSet {
    entries: Vec<(usize, Vec<f32>)>,
}

impl SupportSet {
    pub fn new(mut entries: Vec<(usize, Vec<f32>)>) -> Result<Self> {
        entries.sort_by_key(|e| e.0);
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::DuplicateClass(format!("label {}", w[0].0)));
            }
        }
        if let Some(first) = entries.first() {
            let dim = first.1.len();
            if entries.iter().any(|e| e.1.len() != dim) {
                return Err(Error::shape("support", "embeddings differ in dimension"));
            }
        }
        Ok(SupportSet { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries.first().map_or(0, |e| e.1.len())
    }

    pub fn labels(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    pub fn contains(&self, label: usize) -> bool {
        self.entries.binary_search_by_key(&label, |e| e.0).is_ok()
    }

    pub fn entries(&self) -> &[(usize, Vec<f32>)] {
        &self.entries
    }

    pub fn embedding(&self, label: usize) -> Option<&[f32]> {
        self.entries
            .binary_search_by_key(&label, |e| e.0)
            .ok()
            .map(|i| self.entries[i].1.as_slice())
    }

    /// Nearest class and its squared distance.
    pub fn classify(&self, query: &[f32]) -> Result<(usize, f64)> {
        if self.entries.is_empty() {
            return Err(Error::InvalidArgument("support set is empty".into()));
        }
        if query.len() != self.dim() {
            return Err(Error::shape(
                "classify",
                format!("query has {} dims, support {}", query.len(), self.dim()),
            ));
        }
        Ok(nearest(query, self.entries.iter().map(|(l, e)| (*l, e.as_slice()))).expect("non-empty"))
    }
}

/// Embeds one prototype per class with `model` (eval mode).
pub fn build_support(model: &mut Vpe<f32>, prototypes: &[(usize, ImageTensor)]) -> Result<SupportSet> {
    if prototypes.is_empty() {
        return Ok(SupportSet { entries: Vec::new() });
    }
    let batch = ImageTensor::stack(prototypes.iter().map(|p| &p.1))?;
    let emb = embed(model, &batch, 256)?;
    let dim = emb.shape()[1];
    let entries = prototypes
        .iter()
        .enumerate()
        .map(|(i, (label, _))| (*label, emb.data()[i * dim..(i + 1) * dim].to_vec()))
        .collect();
    SupportSet::new(entries)
}

/// Naive double loop over every query and support entry, used to validate
/// [`SupportSet::classify`].
pub fn brute_force_nn_oracle(queries: &[Vec<f32>], support: &[(usize, Vec<f32>)]) -> Vec<usize> {
    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        let mut best_label = usize::MAX;
        let mut best = f64::INFINITY;
        for (label, s) in support {
            let mut d = 0.0f64;
            for k in 0..q.len() {
                let diff = f64::from(q[k]) - f64::from(s[k]);
                d += diff * diff;
            }
            if d < best || (d == best && *label < best_label) {
                best = d;
                best_label = *label;
            }
        }
        out.push(best_label);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Every prototype in the support; every query not used in training.
    All,
    /// Unseen prototypes only; unseen-class queries.
    Unseen,
    /// Every prototype in the support; unseen-class queries only.
    Mixed,
    /// Every prototype in the support; held-out queries of seen classes.
    /// Touches no unseen class, so it serves as validation.
    Seen,
}

impl Protocol {
    /// The reported test protocols.
    pub const ALL: [Protocol; 3] = [Protocol::All, Protocol::Unseen, Protocol::Mixed];

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::All => "all",
            Protocol::Unseen => "unseen",
            Protocol::Mixed => "mixed",
            Protocol::Seen => "seen",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Protocol::All),
            "unseen" => Ok(Protocol::Unseen),
            "mixed" => Ok(Protocol::Mixed),
            "seen" => Ok(Protocol::Seen),
            other => Err(Error::InvalidArgument(format!("unknown protocol `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub id: String,
    pub label: usize,
    pub embedding: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub id: String,
    pub label: usize,
    pub predicted: usize,
    /// Euclidean distance to the predicted prototype.
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassAccuracy {
    pub label: usize,
    pub name: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub support_size: usize,
    pub checkpoint: String,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub per_class: Vec<ClassAccuracy>,
    /// `(true label, predicted label, count)` for every nonzero cell.
    pub confusion: Vec<(usize, usize, usize)>,
    #[serde(skip)]
    pub predictions: Vec<Prediction>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `query_id,true_label,predicted_label,distance` rows with a header.
    pub fn predictions_csv(&self) -> String {
        let mut s = String::from("query_id,true_label,predicted_label,distance\n");
        for p in &self.predictions {
            s.push_str(&format!("{},{},{},{}\n", p.id, p.label, p.predicted, p.distance));
        }
        s
    }
}

/// Classifies `queries` against `support` and aggregates. `names` maps
/// labels to display names where known.
pub fn evaluate(
    protocol: Protocol,
    support: &SupportSet,
    queries: &[Query],
    names: &BTreeMap<usize, String>,
    checkpoint: &str,
) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::Dataset(format!("protocol `{protocol}` has no queries")));
    }
    if let Some(q) = queries.iter().find(|q| !support.contains(q.label)) {
        return Err(Error::Dataset(format!(
            "query `{}` has class {} which is absent from the support set",
            q.id, q.label
        )));
    }
    let mut predictions = Vec::with_capacity(queries.len());
    let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut confusion: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for q in queries {
        let (predicted, distance) = support.classify(&q.embedding)?;
        let e = per.entry(q.label).or_default();
        e.1 += 1;
        if predicted == q.label {
            e.0 += 1;
        }
        *confusion.entry((q.label, predicted)).or_default() += 1;
        predictions.push(Prediction {
            id: q.id.clone(),
            label: q.label,
            predicted,
            distance: distance.sqrt(),
        });
    }
    let correct = per.values().map(|v| v.0).sum();
    let total = queries.len();
    Ok(EvalReport {
        protocol,
        support_size: support.len(),
        checkpoint: checkpoint.to_string(),
        accuracy: correct as f64 / total as f64,
        correct,
        total,
        per_class: per
            .into_iter()
            .map(|(label, (c, t))| ClassAccuracy {
                label,
                name: names.get(&label).cloned().unwrap_or_default(),
                correct: c,
                total: t,
                accuracy: c as f64 / t as f64,
            })
            .collect(),
        confusion: confusion.into_iter().map(|((a, b), n)| (a, b, n)).collect(),
        predictions,
    })
}

/// Support classes and query images for `protocol` on `dataset`.
pub fn protocol_split(dataset: &Dataset, protocol: Protocol) -> (Vec<usize>, Vec<(String, usize, std::path::PathBuf)>) {
    let m = &dataset.manifest;
    let support: Vec<usize> = match protocol {
        Protocol::All | Protocol::Mixed | Protocol::Seen => m.classes.iter().map(|c| c.label).collect(),
        Protocol::Unseen => m.unseen().map(|c| c.label).collect(),
    };
    let mut queries = Vec::new();
    for class in &m.classes {
        let wanted = match protocol {
            Protocol::All => true,
            Protocol::Unseen | Protocol::Mixed => !class.seen,
            Protocol::Seen => class.seen,
        };
        if !wanted {
            continue;
        }
        for real in class.query_reals() {
            let file = real.path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
            queries.push((format!("{}/{file}", class.name), class.label, real.path.clone()));
        }
    }
    (support, queries)
}

/// Embeds the protocol's prototypes and queries with `model` and evaluates.
pub fn evaluate_dataset(model: &mut Vpe<f32>, dataset: &Dataset, protocol: Protocol, checkpoint: &str) -> Result<EvalReport> {
    let (support_labels, query_files) = protocol_split(dataset, protocol);
    let protos = support_labels
        .iter()
        .map(|&l| Ok((l, dataset.prototype(l)?)))
        .collect::<Result<Vec<_>>>()?;
    let support = build_support(model, &protos)?;
    let mut queries = Vec::with_capacity(query_files.len());
    for chunk in query_files.chunks(256) {
        let images = chunk
            .iter()
            .map(|(_, _, path)| dataset.load_image(path))
            .collect::<Result<Vec<_>>>()?;
        let emb = embed(model, &ImageTensor::stack(&images)?, 256)?;
        let dim = emb.shape()[1];
        for (i, (id, label, _)) in chunk.iter().enumerate() {
            queries.push(Query {
                id: id.clone(),
                label: *label,
                embedding: emb.data()[i * dim..(i + 1) * dim].to_vec(),
            });
        }
    }
    let names = dataset
        .manifest
        .classes
        .iter()
        .map(|c| (c.label, c.name.clone()))
        .collect();
    evaluate(protocol, &support, &queries, &names, checkpoint)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn support2() -> SupportSet {
        SupportSet::new(vec![(1, vec![1.0, 0.0]), (0, vec![0.0, 0.0])]).unwrap()
    }

    #[test]
    fn nearest_and_ties() {
        let s = support2();
        assert_eq!(s.classify(&[0.1, 0.0]).unwrap().0, 0);
        assert_eq!(s.classify(&[1.0, 0.0]).unwrap(), (1, 0.0));
        assert_eq!(s.classify(&[0.5, 0.0]).unwrap().0, 0);
        let reversed = SupportSet::new(vec![(7, vec![1.0]), (3, vec![-1.0])]).unwrap();
        assert_eq!(reversed.classify(&[0.0]).unwrap().0, 3);
    }

    #[test]
    fn rejects_bad_support() {
        assert!(matches!(
            SupportSet::new(vec![(0, vec![0.0]), (0, vec![1.0])]),
            Err(Error::DuplicateClass(_))
        ));
        assert!(SupportSet::new(vec![(0, vec![0.0]), (1, vec![1.0, 2.0])]).is_err());
        assert!(SupportSet::new(vec![]).unwrap().classify(&[0.0]).is_err());
    }

    #[test]
    fn oracle_single_and_tie() {
        assert_eq!(brute_force_nn_oracle(&[vec![3.0]], &[(4, vec![0.0])]), vec![4]);
        assert_eq!(
            brute_force_nn_oracle(&[vec![0.0]], &[(9, vec![1.0]), (2, vec![-1.0])]),
            vec![2]
        );
    }

    #[test]
    fn oracle_queries_are_perfect() {
        let s = SupportSet::new((0..5).map(|l| (l, vec![l as f32, (l * l) as f32])).collect()).unwrap();
        let queries: Vec<Query> = s
            .entries()
            .iter()
            .map(|(l, e)| Query {
                id: format!("q{l}"),
                label: *l,
                embedding: e.clone(),
            })
            .collect();
        let r = evaluate(Protocol::All, &s, &queries, &BTreeMap::new(), "x").unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.per_class.len(), 5);
        assert!(r.to_json().contains("\"accuracy\": 1.0"));
    }

    #[test]
    fn query_outside_support_rejected() {
        let q = Query {
            id: "a".into(),
            label: 5,
            embedding: vec![0.0, 0.0],
        };
        assert!(evaluate(Protocol::Unseen, &support2(), &[q], &BTreeMap::new(), "x").is_err());
    }
}
