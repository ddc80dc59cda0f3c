//! User-product graphs and pairwise complementarity scoring.
//!
//! Graphs are binarized: one entry per (user, node) keeping the earliest
//! event timestamp. The co-purchase score of an ordered pair (i, j) counts
//! users who bought j strictly after i, normalized by the geometric mean of
//! the two node degrees; the substitutivity score counts view-then-buy users
//! the same way; complementarity is their difference.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{EventKind, InteractionEvent};

/// Whether graph nodes are individual products or their categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Product,
    Category,
}

/// Which interaction kind the graph edges record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Purchase,
    View,
}

/// Binarized user-node graph with first-event timestamps.
#[derive(Debug, Clone)]
pub struct BipartiteGraph {
    pub node_kind: NodeKind,
    pub edge_kind: EdgeKind,
    /// (user_id, node_id) -> earliest event timestamp.
    entries: BTreeMap<(String, String), i64>,
}

impl BipartiteGraph {
    /// Build a graph from validated events, keeping the minimum timestamp per
    /// (user, node) pair. Category graphs map events through `category_id`.
    pub fn build(events: &[InteractionEvent], edge_kind: EdgeKind, node_kind: NodeKind) -> Self {
        let wanted = match edge_kind {
            EdgeKind::Purchase => EventKind::Purchase,
            EdgeKind::View => EventKind::View,
        };
        let mut entries: BTreeMap<(String, String), i64> = BTreeMap::new();
        for ev in events.iter().filter(|e| e.kind == wanted) {
            let node = match node_kind {
                NodeKind::Product => ev.item_id.clone(),
                NodeKind::Category => ev.category_id.clone(),
            };
            entries
                .entry((ev.user_id.clone(), node))
                .and_modify(|t| *t = (*t).min(ev.timestamp))
                .or_insert(ev.timestamp);
        }
        BipartiteGraph {
            node_kind,
            edge_kind,
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn timestamp(&self, user: &str, node: &str) -> Option<i64> {
        self.entries
            .get(&(user.to_string(), node.to_string()))
            .copied()
    }

    /// Nodes grouped per user, in deterministic (user, node) order.
    fn by_user(&self) -> BTreeMap<&str, Vec<(&str, i64)>> {
        let mut map: BTreeMap<&str, Vec<(&str, i64)>> = BTreeMap::new();
        for ((user, node), ts) in &self.entries {
            map.entry(user.as_str()).or_default().push((node.as_str(), *ts));
        }
        map
    }

    /// Number of distinct users per node.
    fn degrees(&self) -> BTreeMap<&str, usize> {
        let mut deg: BTreeMap<&str, usize> = BTreeMap::new();
        for (_, node) in self.entries.keys() {
            *deg.entry(node.as_str()).or_default() += 1;
        }
        deg
    }
}

/// Which pairwise score a table holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    CoPurchase,
    Substitutivity,
    Complementarity,
}

/// Sparse directional pairwise scores; absent pairs read as 0.
#[derive(Debug, Clone)]
pub struct ScoreTable {
    pub kind: ScoreKind,
    pub node_kind: NodeKind,
    scores: BTreeMap<(String, String), f64>,
}

impl ScoreTable {
    pub fn new(kind: ScoreKind, node_kind: NodeKind) -> Self {
        ScoreTable {
            kind,
            node_kind,
            scores: BTreeMap::new(),
        }
    }

    pub fn get(&self, i: &str, j: &str) -> f64 {
        self.scores
            .get(&(i.to_string(), j.to_string()))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(String, String), &f64)> {
        self.scores.iter()
    }

    fn insert(&mut self, i: String, j: String, value: f64) {
        self.scores.insert((i, j), value);
    }
}

/// Co-purchase scores: for each ordered pair (i, j), the number of users who
/// bought both with j strictly later, over sqrt(deg(i) * deg(j)). Pairs with
/// zero numerator are omitted.
pub fn co_purchase_scores(purchases: &BipartiteGraph) -> Result<ScoreTable> {
    if purchases.edge_kind != EdgeKind::Purchase {
        return Err(Error::invalid("co-purchase scores need a purchase graph"));
    }
    let deg = purchases.degrees();
    let mut numerators: BTreeMap<(String, String), usize> = BTreeMap::new();
    for (_, nodes) in purchases.by_user() {
        for &(i, ti) in &nodes {
            for &(j, tj) in &nodes {
                if i != j && tj > ti {
                    *numerators.entry((i.to_string(), j.to_string())).or_default() += 1;
                }
            }
        }
    }
    let mut table = ScoreTable::new(ScoreKind::CoPurchase, purchases.node_kind);
    for ((i, j), num) in numerators {
        let denom = ((deg[i.as_str()] * deg[j.as_str()]) as f64).sqrt();
        table.insert(i, j, num as f64 / denom);
    }
    Ok(table)
}

/// Substitutivity scores: users who viewed i and later bought j, over
/// sqrt(view-degree(i) * purchase-degree(j)). Zero-numerator pairs omitted.
pub fn substitutivity_scores(
    views: &BipartiteGraph,
    purchases: &BipartiteGraph,
) -> Result<ScoreTable> {
    if views.edge_kind != EdgeKind::View || purchases.edge_kind != EdgeKind::Purchase {
        return Err(Error::invalid(
            "substitutivity scores need a view graph and a purchase graph",
        ));
    }
    if views.node_kind != purchases.node_kind {
        return Err(Error::invalid("graphs must share the same node kind"));
    }
    let view_deg = views.degrees();
    let buy_deg = purchases.degrees();
    let buys_by_user = purchases.by_user();
    let mut numerators: BTreeMap<(String, String), usize> = BTreeMap::new();
    for (user, viewed) in views.by_user() {
        let Some(bought) = buys_by_user.get(user) else {
            continue;
        };
        for &(i, t_view) in &viewed {
            for &(j, t_buy) in bought {
                if t_buy > t_view {
                    *numerators.entry((i.to_string(), j.to_string())).or_default() += 1;
                }
            }
        }
    }
    let mut table = ScoreTable::new(ScoreKind::Substitutivity, views.node_kind);
    for ((i, j), num) in numerators {
        let denom = ((view_deg[i.as_str()] * buy_deg[j.as_str()]) as f64).sqrt();
        table.insert(i, j, num as f64 / denom);
    }
    Ok(table)
}

/// Complementarity: s = p - q over the union of keys, absent entries read as 0.
pub fn complementarity_scores(p: &ScoreTable, q: &ScoreTable) -> Result<ScoreTable> {
    if p.kind != ScoreKind::CoPurchase || q.kind != ScoreKind::Substitutivity {
        return Err(Error::invalid(
            "complementarity needs a co-purchase table and a substitutivity table",
        ));
    }
    if p.node_kind != q.node_kind {
        return Err(Error::invalid("score tables must share the same node kind"));
    }
    let mut table = ScoreTable::new(ScoreKind::Complementarity, p.node_kind);
    for (key, &val) in p.iter() {
        table.insert(key.0.clone(), key.1.clone(), val - q.get(&key.0, &key.1));
    }
    for (key, &val) in q.iter() {
        if p.scores.get(key).is_none() {
            table.insert(key.0.clone(), key.1.clone(), -val);
        }
    }
    Ok(table)
}

/// One candidate complement for an anchor product.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidatePair {
    pub anchor: String,
    pub candidate: String,
    pub complementarity: f64,
    pub co_purchase: f64,
    pub substitutivity: f64,
}

/// The three score tables of one node level, kept together so candidate
/// selection can filter on q while sorting on s.
#[derive(Debug, Clone)]
pub struct ScoreSet {
    pub p: ScoreTable,
    pub q: ScoreTable,
    pub s: ScoreTable,
}

impl ScoreSet {
    pub fn from_tables(p: ScoreTable, q: ScoreTable) -> Result<Self> {
        let s = complementarity_scores(&p, &q)?;
        Ok(ScoreSet { p, q, s })
    }

    /// Score a full event log at the given node level.
    pub fn from_events(events: &[InteractionEvent], node_kind: NodeKind) -> Result<Self> {
        let purchases = BipartiteGraph::build(events, EdgeKind::Purchase, node_kind);
        let views = BipartiteGraph::build(events, EdgeKind::View, node_kind);
        let p = co_purchase_scores(&purchases)?;
        let q = substitutivity_scores(&views, &purchases)?;
        ScoreSet::from_tables(p, q)
    }

    pub fn node_kind(&self) -> NodeKind {
        self.s.node_kind
    }

    pub fn complementarity(&self, i: &str, j: &str) -> f64 {
        self.s.get(i, j)
    }

    /// Candidates (anchor, j) with s >= min_s and q <= max_q, sorted by s
    /// descending with ties broken by candidate id ascending, truncated to
    /// top_n. The anchor itself is never a candidate; an unknown anchor
    /// yields an empty list.
    pub fn select_candidates(
        &self,
        anchor: &str,
        min_s: f64,
        max_q: f64,
        top_n: usize,
    ) -> Result<Vec<CandidatePair>> {
        if top_n == 0 {
            return Err(Error::invalid("top_n must be at least 1"));
        }
        let lo = (anchor.to_string(), String::new());
        let mut pairs: Vec<CandidatePair> = self
            .s
            .scores
            .range(lo..)
            .take_while(|((i, _), _)| i == anchor)
            .filter_map(|((i, j), &s)| {
                let q = self.q.get(i, j);
                if j != anchor && s >= min_s && q <= max_q {
                    Some(CandidatePair {
                        anchor: i.clone(),
                        candidate: j.clone(),
                        complementarity: s,
                        co_purchase: self.p.get(i, j),
                        substitutivity: q,
                    })
                } else {
                    None
                }
            })
            .collect();
        pairs.sort_by(|a, b| {
            b.complementarity
                .partial_cmp(&a.complementarity)
                .expect("scores are finite")
                .then_with(|| a.candidate.cmp(&b.candidate))
        });
        pairs.truncate(top_n);
        Ok(pairs)
    }

    /// All anchors that have at least one stored pair.
    pub fn anchors(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for ((i, _), _) in self.s.iter() {
            if out.last() != Some(&i.as_str()) {
                out.push(i.as_str());
            }
        }
        out
    }

    /// Write `i,j,p,q,s` rows over the union of keys, sorted by (i, j),
    /// reals with 6 significant digits.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "i,j,p,q,s")?;
        let mut keys: Vec<&(String, String)> = self.p.scores.keys().collect();
        keys.extend(self.q.scores.keys());
        keys.sort();
        keys.dedup();
        for key in keys {
            let (i, j) = key;
            writeln!(
                w,
                "{},{},{},{},{}",
                i,
                j,
                fmt_sig6(self.p.get(i, j)),
                fmt_sig6(self.q.get(i, j)),
                fmt_sig6(self.s.get(i, j)),
            )?;
        }
        Ok(())
    }

    /// Read a table previously written by [`ScoreSet::write_csv`].
    pub fn read_csv(reader: impl BufRead, node_kind: NodeKind) -> Result<Self> {
        let mut p = ScoreTable::new(ScoreKind::CoPurchase, node_kind);
        let mut q = ScoreTable::new(ScoreKind::Substitutivity, node_kind);
        let mut s = ScoreTable::new(ScoreKind::Complementarity, node_kind);
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if idx == 0 {
                if line.trim() != "i,j,p,q,s" {
                    return Err(Error::Parse {
                        line: 1,
                        message: format!("unexpected score CSV header: {line}"),
                    });
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(Error::Parse {
                    line: idx + 1,
                    message: format!("expected 5 fields, got {}", fields.len()),
                });
            }
            let parse = |f: &str| -> Result<f64> {
                f.parse::<f64>().map_err(|e| Error::Parse {
                    line: idx + 1,
                    message: e.to_string(),
                })
            };
            let (i, j) = (fields[0].to_string(), fields[1].to_string());
            let (pv, qv, sv) = (parse(fields[2])?, parse(fields[3])?, parse(fields[4])?);
            if pv != 0.0 {
                p.insert(i.clone(), j.clone(), pv);
            }
            if qv != 0.0 {
                q.insert(i.clone(), j.clone(), qv);
            }
            s.insert(i, j, sv);
        }
        Ok(ScoreSet { p, q, s })
    }
}

/// Format with 6 significant digits; zero prints as plain 0.
pub fn fmt_sig6(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else {
        format!("{v:.5e}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn buy(user: &str, item: &str, ts: i64) -> InteractionEvent {
        InteractionEvent {
            user_id: user.into(),
            item_id: item.into(),
            category_id: format!("cat_{item}"),
            kind: EventKind::Purchase,
            timestamp: ts,
        }
    }

    fn view(user: &str, item: &str, ts: i64) -> InteractionEvent {
        InteractionEvent {
            user_id: user.into(),
            item_id: item.into(),
            category_id: format!("cat_{item}"),
            kind: EventKind::View,
            timestamp: ts,
        }
    }

    #[test]
    fn build_keeps_earliest_timestamp() {
        let events = vec![buy("u", "i", 9), buy("u", "i", 5)];
        let g = BipartiteGraph::build(&events, EdgeKind::Purchase, NodeKind::Product);
        assert_eq!(g.timestamp("u", "i"), Some(5));
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn build_without_matching_events_is_empty() {
        let events = vec![view("u", "i", 5)];
        let g = BipartiteGraph::build(&events, EdgeKind::Purchase, NodeKind::Product);
        assert!(g.is_empty());
    }

    #[test]
    fn build_disjoint_users() {
        let events = vec![buy("u1", "i1", 1), buy("u2", "i2", 2)];
        let g = BipartiteGraph::build(&events, EdgeKind::Purchase, NodeKind::Product);
        assert_eq!(g.len(), 2);
        assert_eq!(g.timestamp("u1", "i2"), None);
    }

    #[test]
    fn category_graph_maps_through_category_id() {
        let mut e = buy("u", "i1", 3);
        e.category_id = "c9".into();
        let g = BipartiteGraph::build(&[e], EdgeKind::Purchase, NodeKind::Category);
        assert_eq!(g.timestamp("u", "c9"), Some(3));
    }

    #[test]
    fn co_purchase_ordered_pair() {
        // A buys i@1 then j@2; B buys i@3 only. deg(i)=2, deg(j)=1.
        let events = vec![buy("A", "i", 1), buy("A", "j", 2), buy("B", "i", 3)];
        let g = BipartiteGraph::build(&events, EdgeKind::Purchase, NodeKind::Product);
        let p = co_purchase_scores(&g).unwrap();
        assert_abs_diff_eq!(p.get("i", "j"), 1.0 / 2f64.sqrt(), epsilon = 1e-12);
        assert_eq!(p.get("j", "i"), 0.0);
        assert_eq!(p.len(), 1);
    }

    #[test]
    fn equal_timestamps_contribute_nothing() {
        let events = vec![buy("u", "i", 1), buy("u", "j", 1)];
        let g = BipartiteGraph::build(&events, EdgeKind::Purchase, NodeKind::Product);
        let p = co_purchase_scores(&g).unwrap();
        assert!(p.is_empty());
    }

    #[test]
    fn saturated_co_purchase_reaches_one() {
        let mut events = Vec::new();
        for u in 0..7 {
            events.push(buy(&format!("u{u}"), "i", 1));
            events.push(buy(&format!("u{u}"), "j", 2));
        }
        let g = BipartiteGraph::build(&events, EdgeKind::Purchase, NodeKind::Product);
        let p = co_purchase_scores(&g).unwrap();
        assert_abs_diff_eq!(p.get("i", "j"), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn substitutivity_view_then_buy() {
        let events = vec![view("u", "i", 1), buy("u", "j", 2)];
        let views = BipartiteGraph::build(&events, EdgeKind::View, NodeKind::Product);
        let buys = BipartiteGraph::build(&events, EdgeKind::Purchase, NodeKind::Product);
        let q = substitutivity_scores(&views, &buys).unwrap();
        assert_abs_diff_eq!(q.get("i", "j"), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn substitutivity_respects_time_order() {
        let events = vec![buy("u", "j", 1), view("u", "i", 2)];
        let views = BipartiteGraph::build(&events, EdgeKind::View, NodeKind::Product);
        let buys = BipartiteGraph::build(&events, EdgeKind::Purchase, NodeKind::Product);
        let q = substitutivity_scores(&views, &buys).unwrap();
        assert!(q.is_empty());
    }

    #[test]
    fn substitutivity_disjoint_populations_is_empty() {
        let events = vec![view("u1", "i", 1), buy("u2", "j", 2)];
        let views = BipartiteGraph::build(&events, EdgeKind::View, NodeKind::Product);
        let buys = BipartiteGraph::build(&events, EdgeKind::Purchase, NodeKind::Product);
        let q = substitutivity_scores(&views, &buys).unwrap();
        assert!(q.is_empty());
    }

    fn table(kind: ScoreKind, entries: &[(&str, &str, f64)]) -> ScoreTable {
        let mut t = ScoreTable::new(kind, NodeKind::Product);
        for (i, j, v) in entries {
            t.insert(i.to_string(), j.to_string(), *v);
        }
        t
    }

    #[test]
    fn complementarity_subtracts() {
        let p = table(ScoreKind::CoPurchase, &[("i", "j", 0.7)]);
        let q = table(ScoreKind::Substitutivity, &[("i", "j", 0.2)]);
        let s = complementarity_scores(&p, &q).unwrap();
        assert_abs_diff_eq!(s.get("i", "j"), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn complementarity_reads_absent_p_as_zero() {
        let p = table(ScoreKind::CoPurchase, &[]);
        let q = table(ScoreKind::Substitutivity, &[("i", "j", 0.3)]);
        let s = complementarity_scores(&p, &q).unwrap();
        assert_abs_diff_eq!(s.get("i", "j"), -0.3, epsilon = 1e-12);
    }

    #[test]
    fn complementarity_of_empty_tables_is_empty() {
        let p = table(ScoreKind::CoPurchase, &[]);
        let q = table(ScoreKind::Substitutivity, &[]);
        assert!(complementarity_scores(&p, &q).unwrap().is_empty());
    }

    #[test]
    fn complementarity_rejects_mismatched_node_kinds() {
        let p = table(ScoreKind::CoPurchase, &[]);
        let mut q = table(ScoreKind::Substitutivity, &[]);
        q.node_kind = NodeKind::Category;
        assert!(complementarity_scores(&p, &q).is_err());
    }

    fn demo_set() -> ScoreSet {
        let p = table(
            ScoreKind::CoPurchase,
            &[("a", "x", 0.9), ("a", "y", 0.5), ("a", "z", 0.5), ("b", "x", 0.4)],
        );
        let q = table(
            ScoreKind::Substitutivity,
            &[("a", "x", 0.05), ("a", "y", 0.3), ("b", "x", 0.0)],
        );
        ScoreSet::from_tables(p, q).unwrap()
    }

    #[test]
    fn select_candidates_sorted_and_unfiltered() {
        let set = demo_set();
        let got = set.select_candidates("a", -1.0, 1.0, usize::MAX).unwrap();
        assert_eq!(got.len(), 3);
        assert_eq!(got[0].candidate, "x");
        assert!(got[0].complementarity >= got[1].complementarity);
    }

    #[test]
    fn select_candidates_threshold_above_everything() {
        let set = demo_set();
        assert!(set.select_candidates("a", 2.0, 1.0, 10).unwrap().is_empty());
    }

    #[test]
    fn select_candidates_ties_break_by_id() {
        let p = table(ScoreKind::CoPurchase, &[("a", "m", 0.5), ("a", "k", 0.5)]);
        let q = table(ScoreKind::Substitutivity, &[]);
        let set = ScoreSet::from_tables(p, q).unwrap();
        let got = set.select_candidates("a", -1.0, 1.0, 10).unwrap();
        assert_eq!(got[0].candidate, "k");
        assert_eq!(got[1].candidate, "m");
    }

    #[test]
    fn select_candidates_unknown_anchor_is_empty() {
        let set = demo_set();
        assert!(set.select_candidates("zzz", -1.0, 1.0, 10).unwrap().is_empty());
    }

    #[test]
    fn candidate_invariant_holds() {
        let set = demo_set();
        for c in set.select_candidates("a", -1.0, 1.0, 10).unwrap() {
            assert!((c.complementarity - (c.co_purchase - c.substitutivity)).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_round_trip() {
        let set = demo_set();
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("i,j,p,q,s\n"));
        let back = ScoreSet::read_csv(std::io::Cursor::new(text), NodeKind::Product).unwrap();
        for (key, &v) in set.s.iter() {
            assert_abs_diff_eq!(back.s.get(&key.0, &key.1), v, epsilon = 1e-5);
        }
    }
}
