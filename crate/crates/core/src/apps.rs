//! Batch procedures over influence scores: attack and improvement plans,
//! scoring external rewiring traces, homophily breakdowns.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::graph::{CandidateEdit, EdgeClass, EditKind, Graph};
use crate::influence::{InfluenceBreakdown, InfluenceEngine, LissaConfig};
use crate::metrics::EvalMetric;
use crate::model::{accuracy, forward, GcnParams};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Increase,
    Decrease,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditPlan {
    pub entries: Vec<InfluenceBreakdown>,
    pub budget: usize,
    pub objective: EvalMetric,
    pub direction: Direction,
}

impl EditPlan {
    pub fn edits(&self) -> Vec<CandidateEdit> {
        self.entries.iter().map(|b| b.edit).collect()
    }
}

fn lexicographic(a: &InfluenceBreakdown, b: &InfluenceBreakdown) -> Ordering {
    (a.edit.u, a.edit.v, a.edit.kind).cmp(&(b.edit.u, b.edit.v, b.edit.kind))
}

fn take_unique(sorted: Vec<InfluenceBreakdown>, k: usize) -> Vec<InfluenceBreakdown> {
    let mut seen = HashSet::new();
    sorted.into_iter().filter(|b| seen.insert(b.edit.pair())).take(k).collect()
}

fn check(influences: &[InfluenceBreakdown], k: usize) -> Result<(), Error> {
    if influences.is_empty() {
        return Err(Error::Config("no influences to select from".into()));
    }
    if k == 0 {
        return Err(Error::Config("budget must be at least 1".into()));
    }
    Ok(())
}

/// Top-`k` edits by descending total, ties broken by `(u, v, kind)`.
pub fn attack_select(influences: &[InfluenceBreakdown], k: usize) -> Result<EditPlan, Error> {
    check(influences, k)?;
    let mut sorted = influences.to_vec();
    sorted.sort_by(|a, b| b.total.total_cmp(&a.total).then_with(|| lexicographic(a, b)));
    Ok(EditPlan {
        entries: take_unique(sorted, k),
        budget: k,
        objective: influences[0].metric,
        direction: Direction::Increase,
    })
}

/// Edits predicted to improve `metric`: the `k` most negative totals for
/// validation loss, the `k` most positive for Dirichlet energy and
/// over-squashing. Edits predicted not to help are never selected.
pub fn improve_select(influences: &[InfluenceBreakdown], k: usize, metric: EvalMetric) -> Result<EditPlan, Error> {
    check(influences, k)?;
    let lower_is_better = metric == EvalMetric::ValidationLoss;
    let mut sorted: Vec<InfluenceBreakdown> = influences
        .iter()
        .filter(|b| b.metric == metric && if lower_is_better { b.total < 0.0 } else { b.total > 0.0 })
        .cloned()
        .collect();
    sorted.sort_by(|a, b| {
        let o = if lower_is_better { a.total.total_cmp(&b.total) } else { b.total.total_cmp(&a.total) };
        o.then_with(|| lexicographic(a, b))
    });
    Ok(EditPlan {
        entries: take_unique(sorted, k),
        budget: k,
        objective: metric,
        direction: if lower_is_better { Direction::Decrease } else { Direction::Increase },
    })
}

/// Whether a predicted change counts as an improvement of `metric`.
pub fn improves(metric: EvalMetric, total: f64) -> bool {
    match metric {
        EvalMetric::ValidationLoss => total < 0.0,
        _ => total > 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignCount {
    pub metric: String,
    pub improve: usize,
    pub worsen: usize,
    pub neutral: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    pub rows: Vec<InfluenceBreakdown>,
    pub summary: Vec<SignCount>,
}

/// Influence of every edit in an external list under each metric.
pub fn score_edit_list(
    theta_s: &GcnParams,
    graph: &Graph,
    edits: &[CandidateEdit],
    metrics: &[EvalMetric],
    lissa: &LissaConfig,
) -> Result<ScoreTable, Error> {
    for (row, e) in edits.iter().enumerate() {
        graph.validate_edit(e).map_err(|err| Error::EditRow { row: row + 1, reason: err.to_string() })?;
    }
    let rows = if edits.is_empty() {
        Vec::new()
    } else {
        InfluenceEngine::new(graph, theta_s, edits)?.scan(metrics, edits, lissa)?
    };
    let summary = metrics
        .iter()
        .map(|&m| {
            let mine: Vec<&InfluenceBreakdown> = rows.iter().filter(|r| r.metric == m).collect();
            let improve = mine.iter().filter(|r| improves(m, r.total)).count();
            let neutral = mine.iter().filter(|r| r.total == 0.0).count();
            SignCount {
                metric: m.name().to_string(),
                improve,
                worsen: mine.len() - improve - neutral,
                neutral,
            }
        })
        .collect();
    Ok(ScoreTable { rows, summary })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomophilyCell {
    pub kind: EditKind,
    pub class: EdgeClass,
    pub metric: String,
    pub mean: f64,
    pub count: usize,
}

/// Mean total per `(kind, class, metric)`; empty cells are omitted.
pub fn homophily_summary(influences: &[InfluenceBreakdown], graph: &Graph) -> Vec<HomophilyCell> {
    let mut cells: BTreeMap<(EvalMetric, EditKind, EdgeClass), (f64, usize)> = BTreeMap::new();
    for b in influences {
        let class = graph.classify_edge(b.edit.u, b.edit.v);
        let e = cells.entry((b.metric, b.edit.kind, class)).or_insert((0.0, 0));
        e.0 += b.total;
        e.1 += 1;
    }
    cells
        .into_iter()
        .map(|((metric, kind, class), (sum, count))| HomophilyCell {
            kind,
            class,
            metric: metric.name().to_string(),
            mean: sum / count as f64,
            count,
        })
        .collect()
}

pub fn test_accuracy(params: &GcnParams, graph: &Graph) -> Result<f64, Error> {
    if graph.test().is_empty() {
        return Err(Error::EmptyMask("test"));
    }
    let logits = forward(params, &graph.adjacency(), graph.features())?.logits;
    Ok(accuracy(&logits, graph.labels(), graph.test()))
}

/// Reads an edit list CSV with header `u,v,kind`.
pub fn read_edit_list(path: &Path) -> Result<Vec<CandidateEdit>, Error> {
    #[derive(Deserialize)]
    struct Row {
        u: usize,
        v: usize,
        kind: String,
    }
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut out = Vec::new();
    for (i, row) in r.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| Error::EditRow { row: i + 1, reason: e.to_string() })?;
        let kind: EditKind = row.kind.parse().map_err(|reason| Error::EditRow { row: i + 1, reason })?;
        if row.u == row.v {
            return Err(Error::EditRow { row: i + 1, reason: "self-loop".into() });
        }
        out.push(CandidateEdit::new(row.u, row.v, kind));
    }
    Ok(out)
}

pub fn write_edit_list(path: &Path, edits: &[CandidateEdit]) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["u", "v", "kind"])?;
    for e in edits {
        w.write_record([e.u.to_string(), e.v.to_string(), e.kind.as_str().to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_plan_csv(path: &Path, plan: &EditPlan) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["rank", "u", "v", "kind", "total"])?;
    for (i, b) in plan.entries.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            b.edit.u.to_string(),
            b.edit.v.to_string(),
            b.edit.kind.as_str().to_string(),
            format!("{:e}", b.total),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_homophily_csv(path: &Path, cells: &[HomophilyCell]) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["kind", "class", "metric", "mean", "count"])?;
    for c in cells {
        w.write_record([
            c.kind.as_str().to_string(),
            c.class.as_str().to_string(),
            c.metric.clone(),
            format!("{:e}", c.mean),
            c.count.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_sign_counts_csv(path: &Path, counts: &[SignCount]) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["metric", "improve", "worsen", "neutral"])?;
    for c in counts {
        w.write_record([c.metric.clone(), c.improve.to_string(), c.worsen.to_string(), c.neutral.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_graph, GeneratorSpec};
    use crate::influence::{sample_candidates, EditKinds};
    use crate::model::GcnConfig;
    use crate::train::{train, TrainConfig};

    fn row(u: usize, v: usize, kind: EditKind, total: f64) -> InfluenceBreakdown {
        InfluenceBreakdown::new(CandidateEdit::new(u, v, kind), EvalMetric::ValidationLoss, total, 0.0)
    }

    #[test]
    fn attack_sorts_and_breaks_ties() {
        let rows = vec![
            row(3, 4, EditKind::Delete, 0.5),
            row(0, 2, EditKind::Insert, 0.9),
            row(1, 2, EditKind::Delete, 0.1),
        ];
        let plan = attack_select(&rows, 10).unwrap();
        let totals: Vec<f64> = plan.entries.iter().map(|b| b.total).collect();
        assert_eq!(totals, vec![0.9, 0.5, 0.1]);
        let ties = vec![
            row(3, 4, EditKind::Delete, 1.0),
            row(0, 5, EditKind::Insert, 1.0),
            row(0, 2, EditKind::Delete, 1.0),
        ];
        let plan = attack_select(&ties, 2).unwrap();
        assert_eq!(plan.edits(), vec![CandidateEdit::delete(0, 2), CandidateEdit::insert(0, 5)]);
        assert!(attack_select(&[], 1).is_err());
        assert_eq!(attack_select(&ties, 2).unwrap(), plan);
    }

    #[test]
    fn improve_filters_by_direction() {
        let one = vec![row(0, 1, EditKind::Delete, -0.2)];
        assert_eq!(improve_select(&one, 1, EvalMetric::ValidationLoss).unwrap().entries.len(), 1);
        let pos = vec![row(0, 1, EditKind::Delete, 0.2), row(0, 2, EditKind::Insert, 0.1)];
        assert!(improve_select(&pos, 5, EvalMetric::ValidationLoss).unwrap().entries.is_empty());
        let de: Vec<InfluenceBreakdown> = pos
            .iter()
            .map(|b| InfluenceBreakdown { metric: EvalMetric::DirichletEnergy, ..b.clone() })
            .collect();
        let plan = improve_select(&de, 5, EvalMetric::DirichletEnergy).unwrap();
        assert_eq!(plan.entries.len(), 2);
        assert!(plan.entries.iter().all(|b| b.total > 0.0));
        assert_eq!(plan.entries[0].total, 0.2);
    }

    #[test]
    fn homophily_cells() {
        let g = generate_graph(&GeneratorSpec::sbm(vec![3, 3], 1.0, 0.0), 0).unwrap();
        let rows = vec![
            row(0, 1, EditKind::Delete, 0.0),
            row(0, 3, EditKind::Insert, 0.0),
            row(1, 2, EditKind::Delete, 0.0),
        ];
        let cells = homophily_summary(&rows, &g);
        assert!(cells.iter().all(|c| c.mean == 0.0));
        assert_eq!(cells.iter().map(|c| c.count).sum::<usize>(), rows.len());
        let rows = vec![row(0, 1, EditKind::Delete, 0.3), row(0, 3, EditKind::Insert, -0.7)];
        let cells = homophily_summary(&rows, &g);
        assert_eq!(cells.len(), 2);
        let ins = cells.iter().find(|c| c.kind == EditKind::Insert).unwrap();
        assert_eq!((ins.class, ins.mean, ins.count), (EdgeClass::Heterophilic, -0.7, 1));
    }

    #[test]
    fn score_list_delegates() {
        let g = generate_graph(&GeneratorSpec::sbm(vec![4, 4], 0.6, 0.15), 5).unwrap();
        let cfg = GcnConfig::for_graph(&g, 2, 4, 0);
        let p = train(&g, &cfg, &TrainConfig { epochs: 60, lr: 0.1, ..TrainConfig::default() }).unwrap().params;
        let lissa = LissaConfig::default();
        let metrics = EvalMetric::all(2);
        let empty = score_edit_list(&p, &g, &[], &metrics, &lissa).unwrap();
        assert!(empty.rows.is_empty());
        let edit = sample_candidates(&g, 1, EditKinds::Delete, 0)[0];
        let t = score_edit_list(&p, &g, &[edit], &metrics, &lissa).unwrap();
        assert_eq!(t.rows.len(), 3);
        let direct = InfluenceEngine::new(&g, &p, &[edit]).unwrap().scan(&metrics, &[edit], &lissa).unwrap();
        assert_eq!(t.rows, direct);
        assert!(t.summary.iter().all(|c| c.improve + c.worsen + c.neutral == 1));
        let bad = CandidateEdit::insert(edit.u, edit.v);
        match score_edit_list(&p, &g, &[edit, bad], &metrics, &lissa) {
            Err(Error::EditRow { row, .. }) => assert_eq!(row, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn edit_list_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("edits.csv");
        let edits = vec![CandidateEdit::delete(0, 1), CandidateEdit::insert(2, 7)];
        write_edit_list(&p, &edits).unwrap();
        assert_eq!(read_edit_list(&p).unwrap(), edits);
        std::fs::write(&p, "u,v,kind\n1,1,delete\n").unwrap();
        assert!(matches!(read_edit_list(&p), Err(Error::EditRow { row: 1, .. })));
        std::fs::write(&p, "u,v,kind\n1,2,flip\n").unwrap();
        assert!(matches!(read_edit_list(&p), Err(Error::EditRow { row: 1, .. })));
    }
}
