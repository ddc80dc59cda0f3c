//! Feature assembly: user profiles, multi-window behavioral aggregates, and
//! the split into assignment features x_hat and prediction features x.
//!
//! The assignment vector carries user and product slots; the prediction
//! vector carries product, user-product and product-product slots. Both get
//! a constant bias slot at index 0. Slot order, families and windows are
//! pinned by a [`FeatureSchema`], whose hash is embedded in trained models
//! to prevent train/serve skew.

pub mod kmeans;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::{NodeKind, ScoreSet};
use crate::ingest::{filter_window, EventKind, InteractionEvent, PushImpression};

const DAY_SECS: i64 = 86_400;
/// Aggregation windows in days, smallest first. Windows nest: they share the
/// reference time as their right edge.
pub const WINDOW_DAYS: [i64; 4] = [1, 2, 7, 28];
/// Event weight used in preference scores.
const VIEW_WEIGHT: f64 = 1.0;
const PURCHASE_WEIGHT: f64 = 5.0;

/// Feature family of a slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    User,
    Product,
    UserProduct,
    ProductProduct,
}

/// Aggregation window tag of a slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Window {
    #[serde(rename = "1d")]
    D1,
    #[serde(rename = "2d")]
    D2,
    #[serde(rename = "7d")]
    D7,
    #[serde(rename = "28d")]
    D28,
}

impl Window {
    pub fn index(self) -> usize {
        match self {
            Window::D1 => 0,
            Window::D2 => 1,
            Window::D7 => 2,
            Window::D28 => 3,
        }
    }
}

/// One named feature slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotDef {
    pub name: String,
    pub family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<Window>,
}

/// Ordered slot list defining both feature vectors. Index 0 of each vector is
/// an implicit constant bias of 1.0 and is not listed as a slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub slots: Vec<SlotDef>,
}

/// A named subset of x_hat indices used for assignment-feature ablations.
#[derive(Debug, Clone)]
pub struct FeatureSetDef {
    pub name: String,
    /// Indices into x_hat; always contains 0 (the bias slot).
    pub x_hat_indices: Vec<usize>,
}

impl FeatureSchema {
    /// The stock schema: cluster one-hot, active score, two demographic
    /// bucket groups, cold-start flag, multi-window product aggregates,
    /// price, multi-window preference scores and the two complementarity
    /// slots.
    pub fn default_schema(user_clusters: usize) -> Self {
        let mut slots = Vec::new();
        for k in 0..user_clusters {
            slots.push(SlotDef {
                name: format!("user_cluster_{k}"),
                family: Family::User,
                window: None,
            });
        }
        slots.push(SlotDef {
            name: "user_active_score".into(),
            family: Family::User,
            window: None,
        });
        for b in 0..4 {
            slots.push(SlotDef {
                name: format!("user_age_bucket_{b}"),
                family: Family::User,
                window: None,
            });
        }
        for b in 0..4 {
            slots.push(SlotDef {
                name: format!("user_income_bucket_{b}"),
                family: Family::User,
                window: None,
            });
        }
        slots.push(SlotDef {
            name: "user_cold_start".into(),
            family: Family::User,
            window: None,
        });
        for w in [Window::D1, Window::D2, Window::D7, Window::D28] {
            slots.push(SlotDef {
                name: format!("product_sales_{}d", WINDOW_DAYS[w.index()]),
                family: Family::Product,
                window: Some(w),
            });
        }
        for w in [Window::D1, Window::D2, Window::D7, Window::D28] {
            slots.push(SlotDef {
                name: format!("product_views_{}d", WINDOW_DAYS[w.index()]),
                family: Family::Product,
                window: Some(w),
            });
        }
        slots.push(SlotDef {
            name: "product_price".into(),
            family: Family::Product,
            window: None,
        });
        slots.push(SlotDef {
            name: "product_price_missing".into(),
            family: Family::Product,
            window: None,
        });
        for w in [Window::D1, Window::D2, Window::D7, Window::D28] {
            slots.push(SlotDef {
                name: format!("pref_item_{}d", WINDOW_DAYS[w.index()]),
                family: Family::UserProduct,
                window: Some(w),
            });
        }
        for w in [Window::D1, Window::D2, Window::D7, Window::D28] {
            slots.push(SlotDef {
                name: format!("pref_category_{}d", WINDOW_DAYS[w.index()]),
                family: Family::UserProduct,
                window: Some(w),
            });
        }
        slots.push(SlotDef {
            name: "comp_item".into(),
            family: Family::ProductProduct,
            window: None,
        });
        slots.push(SlotDef {
            name: "comp_category".into(),
            family: Family::ProductProduct,
            window: None,
        });
        FeatureSchema { slots }
    }

    /// Slot indices entering the assignment vector, in schema order.
    pub fn assignment_slots(&self) -> Vec<usize> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s.family, Family::User | Family::Product))
            .map(|(i, _)| i)
            .collect()
    }

    /// Slot indices entering the prediction vector, in schema order.
    pub fn prediction_slots(&self) -> Vec<usize> {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| {
                matches!(
                    s.family,
                    Family::Product | Family::UserProduct | Family::ProductProduct
                )
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Length of x_hat including the bias slot.
    pub fn assignment_dims(&self) -> usize {
        1 + self.assignment_slots().len()
    }

    /// Length of x including the bias slot.
    pub fn prediction_dims(&self) -> usize {
        1 + self.prediction_slots().len()
    }

    /// Number of user-cluster one-hot slots.
    pub fn user_cluster_count(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| s.name.starts_with("user_cluster_"))
            .count()
    }

    /// Position of a named slot within x_hat, if it is an assignment slot.
    pub fn x_hat_index(&self, name: &str) -> Option<usize> {
        self.assignment_slots()
            .iter()
            .position(|&i| self.slots[i].name == name)
            .map(|pos| pos + 1)
    }

    /// Position of a named slot within x, if it is a prediction slot.
    pub fn x_index(&self, name: &str) -> Option<usize> {
        self.prediction_slots()
            .iter()
            .position(|&i| self.slots[i].name == name)
            .map(|pos| pos + 1)
    }

    /// SHA-256 of the canonical JSON form, hex-encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("schema serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The three assignment-feature ablation sets: full, user-only and
    /// product-only slots of x_hat (each including the bias).
    pub fn feature_sets(&self) -> Vec<FeatureSetDef> {
        let assignment = self.assignment_slots();
        let by_family = |family: Family| -> Vec<usize> {
            let mut idx = vec![0usize];
            idx.extend(
                assignment
                    .iter()
                    .enumerate()
                    .filter(|(_, &slot)| self.slots[slot].family == family)
                    .map(|(pos, _)| pos + 1),
            );
            idx
        };
        vec![
            FeatureSetDef {
                name: "full".into(),
                x_hat_indices: (0..self.assignment_dims()).collect(),
            },
            FeatureSetDef {
                name: "user_only".into(),
                x_hat_indices: by_family(Family::User),
            },
            FeatureSetDef {
                name: "product_only".into(),
                x_hat_indices: by_family(Family::Product),
            },
        ]
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn from_reader(reader: impl std::io::Read) -> Result<Self> {
        Ok(serde_json::from_reader(reader)?)
    }
}

/// Per-user profile feeding the user-family slots.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UserProfile {
    pub cluster: usize,
    pub active_score: f64,
    pub age_bucket: Option<usize>,
    pub income_bucket: Option<usize>,
}

/// Optional demographics side input, one record per user.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemographicsRecord {
    pub user_id: String,
    pub age_bucket: usize,
    pub income_bucket: usize,
}

/// Optional price catalog record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CatalogRecord {
    pub item_id: String,
    pub price: f64,
}

/// One training example: assignment features, prediction features, label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub x_hat: Vec<f64>,
    pub x: Vec<f64>,
    pub y: u8,
    pub user_id: String,
    pub anchor_item_id: String,
    pub pushed_item_id: String,
}

impl Example {
    pub fn validate(&self) -> Result<()> {
        if self.y > 1 {
            return Err(Error::invalid(format!("label must be 0 or 1, got {}", self.y)));
        }
        if self.x_hat.iter().chain(self.x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("example contains a non-finite feature"));
        }
        Ok(())
    }
}

/// Write examples as JSON-lines.
pub fn write_examples(mut w: impl Write, examples: &[Example]) -> Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        writeln!(w)?;
    }
    Ok(())
}

/// Read and validate JSON-lines examples.
pub fn read_examples(reader: impl BufRead) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        ex.validate().map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

/// Purchase counts per user and category, row-normalized to unit L2 norm.
/// Returns (users, categories, rows) with users and categories sorted.
pub fn user_category_matrix(
    events: &[InteractionEvent],
) -> (Vec<String>, Vec<String>, Vec<Vec<f64>>) {
    let users: Vec<String> = events
        .iter()
        .map(|e| e.user_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let categories: Vec<String> = events
        .iter()
        .filter(|e| e.kind == EventKind::Purchase)
        .map(|e| e.category_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let cat_idx: BTreeMap<&str, usize> = categories
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let user_idx: BTreeMap<&str, usize> = users
        .iter()
        .enumerate()
        .map(|(i, u)| (u.as_str(), i))
        .collect();
    let mut rows = vec![vec![0.0; categories.len()]; users.len()];
    for ev in events.iter().filter(|e| e.kind == EventKind::Purchase) {
        rows[user_idx[ev.user_id.as_str()]][cat_idx[ev.category_id.as_str()]] += 1.0;
    }
    for row in rows.iter_mut() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
    (users, categories, rows)
}

/// Rank-normalized activity per user: rank of the user's event count among
/// all users (average ties), divided by the number of users. Users with no
/// events in the period are absent and read as 0.
pub fn active_scores(events: &[InteractionEvent]) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for ev in events {
        *counts.entry(ev.user_id.as_str()).or_default() += 1;
    }
    let n = counts.len();
    let mut ordered: Vec<(&str, usize)> = counts.into_iter().collect();
    ordered.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    let mut scores = BTreeMap::new();
    let mut i = 0;
    while i < ordered.len() {
        let mut j = i;
        while j < ordered.len() && ordered[j].1 == ordered[i].1 {
            j += 1;
        }
        // average rank over the tie group; ranks are 1-based
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for item in &ordered[i..j] {
            scores.insert(item.0.to_string(), avg_rank / n as f64);
        }
        i = j;
    }
    scores
}

/// Entity level of a preference index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrefLevel {
    Item,
    Category,
}

/// Multi-window weighted interaction counts per (user, entity) pair,
/// log-damped and max-normalized per window so scores land in [0, 1].
#[derive(Debug, Clone)]
pub struct PreferenceIndex {
    pub level: PrefLevel,
    counts: BTreeMap<(String, String), [f64; 4]>,
    max_count: [f64; 4],
}

impl PreferenceIndex {
    /// Build from events already restricted to times before `ref_time`.
    pub fn build(events: &[InteractionEvent], ref_time: i64, level: PrefLevel) -> Self {
        let mut counts: BTreeMap<(String, String), [f64; 4]> = BTreeMap::new();
        for ev in events {
            if ev.timestamp >= ref_time {
                continue;
            }
            let age = ref_time - ev.timestamp;
            let weight = match ev.kind {
                EventKind::Purchase => PURCHASE_WEIGHT,
                EventKind::View => VIEW_WEIGHT,
            };
            let entity = match level {
                PrefLevel::Item => ev.item_id.clone(),
                PrefLevel::Category => ev.category_id.clone(),
            };
            let slot = counts
                .entry((ev.user_id.clone(), entity))
                .or_insert([0.0; 4]);
            for (w, days) in WINDOW_DAYS.iter().enumerate() {
                if age < days * DAY_SECS {
                    slot[w] += weight;
                }
            }
        }
        let mut max_count = [0.0f64; 4];
        for wc in counts.values() {
            for w in 0..4 {
                max_count[w] = max_count[w].max(wc[w]);
            }
        }
        PreferenceIndex {
            level,
            counts,
            max_count,
        }
    }

    /// Normalized scores per window for one (user, entity) pair.
    pub fn scores(&self, user: &str, entity: &str) -> [f64; 4] {
        let raw = self
            .counts
            .get(&(user.to_string(), entity.to_string()))
            .copied()
            .unwrap_or([0.0; 4]);
        let mut out = [0.0; 4];
        for w in 0..4 {
            if raw[w] > 0.0 && self.max_count[w] > 0.0 {
                out[w] = (1.0 + raw[w]).ln() / (1.0 + self.max_count[w]).ln();
            }
        }
        out
    }
}

/// Per-item multi-window sales/view aggregates plus price slots.
#[derive(Debug, Clone)]
pub struct ProductAggregates {
    sales: BTreeMap<String, [f64; 4]>,
    views: BTreeMap<String, [f64; 4]>,
    max_sales: [f64; 4],
    max_views: [f64; 4],
    prices: BTreeMap<String, f64>,
    max_price: f64,
}

impl ProductAggregates {
    pub fn build(
        events: &[InteractionEvent],
        catalog: &BTreeMap<String, f64>,
        ref_time: i64,
    ) -> Self {
        let mut sales: BTreeMap<String, [f64; 4]> = BTreeMap::new();
        let mut views: BTreeMap<String, [f64; 4]> = BTreeMap::new();
        for ev in events {
            if ev.timestamp >= ref_time {
                continue;
            }
            let age = ref_time - ev.timestamp;
            let target = match ev.kind {
                EventKind::Purchase => &mut sales,
                EventKind::View => &mut views,
            };
            let slot = target.entry(ev.item_id.clone()).or_insert([0.0; 4]);
            for (w, days) in WINDOW_DAYS.iter().enumerate() {
                if age < days * DAY_SECS {
                    slot[w] += 1.0;
                }
            }
        }
        let max_over = |m: &BTreeMap<String, [f64; 4]>| {
            let mut out = [0.0f64; 4];
            for v in m.values() {
                for w in 0..4 {
                    out[w] = out[w].max(v[w]);
                }
            }
            out
        };
        let max_sales = max_over(&sales);
        let max_views = max_over(&views);
        let max_price = catalog.values().fold(0.0f64, |a, &b| a.max(b));
        ProductAggregates {
            sales,
            views,
            max_sales,
            max_views,
            prices: catalog.clone(),
            max_price,
        }
    }

    fn normalized(&self, raw: &BTreeMap<String, [f64; 4]>, max: &[f64; 4], item: &str) -> [f64; 4] {
        let counts = raw.get(item).copied().unwrap_or([0.0; 4]);
        let mut out = [0.0; 4];
        for w in 0..4 {
            if counts[w] > 0.0 && max[w] > 0.0 {
                out[w] = (1.0 + counts[w]).ln() / (1.0 + max[w]).ln();
            }
        }
        out
    }

    pub fn sales(&self, item: &str) -> [f64; 4] {
        self.normalized(&self.sales, &self.max_sales, item)
    }

    pub fn views(&self, item: &str) -> [f64; 4] {
        self.normalized(&self.views, &self.max_views, item)
    }

    /// Raw 28-day sales count, used by the popularity baseline.
    pub fn raw_sales_28d(&self, item: &str) -> f64 {
        self.sales.get(item).map(|s| s[3]).unwrap_or(0.0)
    }

    /// (price slot, missing indicator).
    pub fn price(&self, item: &str) -> (f64, f64) {
        match self.prices.get(item) {
            Some(&p) if self.max_price > 0.0 => ((1.0 + p).ln() / (1.0 + self.max_price).ln(), 0.0),
            Some(_) => (0.0, 0.0),
            None => (0.0, 1.0),
        }
    }
}

/// How the feature sources are computed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub kmeans_seed: u64,
    pub kmeans_max_iter: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            kmeans_seed: 0,
            kmeans_max_iter: 100,
        }
    }
}

/// Why an impression could not be assembled into an example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum DropReason {
    UnknownUser,
    UnknownItem,
    NotAfterRefTime,
}

impl std::fmt::Display for DropReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DropReason::UnknownUser => write!(f, "unknown_user"),
            DropReason::UnknownItem => write!(f, "unknown_item"),
            DropReason::NotAfterRefTime => write!(f, "not_after_ref_time"),
        }
    }
}

/// All feature sources frozen at one reference time.
#[derive(Debug, Clone)]
pub struct FeatureSources {
    pub schema: FeatureSchema,
    pub ref_time: i64,
    pub profiles: BTreeMap<String, UserProfile>,
    pub aggregates: ProductAggregates,
    pub pref_item: PreferenceIndex,
    pub pref_category: PreferenceIndex,
    pub product_scores: ScoreSet,
    pub category_scores: ScoreSet,
    pub item_category: BTreeMap<String, String>,
    known_items: BTreeSet<String>,
}

impl FeatureSources {
    /// Compute every feature source from events strictly before `ref_time`.
    /// Behavioral windows reach back 28 days; graphs use the full history.
    pub fn build(
        events: &[InteractionEvent],
        catalog: &BTreeMap<String, f64>,
        demographics: &BTreeMap<String, (usize, usize)>,
        ref_time: i64,
        schema: FeatureSchema,
        config: &FeatureConfig,
    ) -> Result<Self> {
        let history: Vec<InteractionEvent> = events
            .iter()
            .filter(|e| e.timestamp < ref_time)
            .cloned()
            .collect();
        let window_start = ref_time - WINDOW_DAYS[3] * DAY_SECS;
        let period = filter_window(&history, window_start.max(1), ref_time)?;

        let (users, _categories, rows) = user_category_matrix(&period);
        let k = schema.user_cluster_count().max(1);
        let assignments = if users.is_empty() {
            Vec::new()
        } else {
            let distinct = rows.iter().map(|r| format!("{r:?}")).collect::<BTreeSet<_>>().len();
            let k_eff = k.min(distinct);
            kmeans::kmeans(&rows, k_eff, config.kmeans_seed, config.kmeans_max_iter)?.assignments
        };
        let activity = active_scores(&period);

        let mut profiles: BTreeMap<String, UserProfile> = BTreeMap::new();
        for (idx, user) in users.iter().enumerate() {
            let demo = demographics.get(user);
            profiles.insert(
                user.clone(),
                UserProfile {
                    cluster: assignments.get(idx).copied().unwrap_or(0),
                    active_score: activity.get(user).copied().unwrap_or(0.0),
                    age_bucket: demo.map(|d| d.0),
                    income_bucket: demo.map(|d| d.1),
                },
            );
        }
        // demographics-only users still get a (cold-ish) profile
        for (user, &(age, income)) in demographics {
            profiles.entry(user.clone()).or_insert(UserProfile {
                cluster: 0,
                active_score: 0.0,
                age_bucket: Some(age),
                income_bucket: Some(income),
            });
        }

        let aggregates = ProductAggregates::build(&period, catalog, ref_time);
        let pref_item = PreferenceIndex::build(&period, ref_time, PrefLevel::Item);
        let pref_category = PreferenceIndex::build(&period, ref_time, PrefLevel::Category);
        let product_scores = ScoreSet::from_events(&history, NodeKind::Product)?;
        let category_scores = ScoreSet::from_events(&history, NodeKind::Category)?;

        let mut item_category = BTreeMap::new();
        for ev in &history {
            item_category
                .entry(ev.item_id.clone())
                .or_insert_with(|| ev.category_id.clone());
        }
        let mut known_items: BTreeSet<String> =
            history.iter().map(|e| e.item_id.clone()).collect();
        known_items.extend(catalog.keys().cloned());

        Ok(FeatureSources {
            schema,
            ref_time,
            profiles,
            aggregates,
            pref_item,
            pref_category,
            product_scores,
            category_scores,
            item_category,
            known_items,
        })
    }

    fn slot_value(
        &self,
        slot: &SlotDef,
        profile: Option<&UserProfile>,
        cold: bool,
        user: &str,
        anchor: &str,
        pushed: &str,
    ) -> Result<f64> {
        let name = slot.name.as_str();
        let value = match slot.family {
            Family::User => {
                if name == "user_cold_start" {
                    return Ok(if cold { 1.0 } else { 0.0 });
                }
                let Some(p) = profile else { return Ok(0.0) };
                if let Some(idx) = name.strip_prefix("user_cluster_") {
                    let idx: usize = idx.parse().map_err(|_| bad_slot(name))?;
                    if p.cluster == idx {
                        1.0
                    } else {
                        0.0
                    }
                } else if name == "user_active_score" {
                    p.active_score
                } else if let Some(b) = name.strip_prefix("user_age_bucket_") {
                    let b: usize = b.parse().map_err(|_| bad_slot(name))?;
                    if p.age_bucket == Some(b) {
                        1.0
                    } else {
                        0.0
                    }
                } else if let Some(b) = name.strip_prefix("user_income_bucket_") {
                    let b: usize = b.parse().map_err(|_| bad_slot(name))?;
                    if p.income_bucket == Some(b) {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    return Err(bad_slot(name));
                }
            }
            Family::Product => {
                if name.starts_with("product_sales_") {
                    let w = slot.window.ok_or_else(|| bad_slot(name))?;
                    self.aggregates.sales(pushed)[w.index()]
                } else if name.starts_with("product_views_") {
                    let w = slot.window.ok_or_else(|| bad_slot(name))?;
                    self.aggregates.views(pushed)[w.index()]
                } else if name == "product_price" {
                    self.aggregates.price(pushed).0
                } else if name == "product_price_missing" {
                    self.aggregates.price(pushed).1
                } else {
                    return Err(bad_slot(name));
                }
            }
            Family::UserProduct => {
                let w = slot.window.ok_or_else(|| bad_slot(name))?;
                if name.starts_with("pref_item_") {
                    self.pref_item.scores(user, pushed)[w.index()]
                } else if name.starts_with("pref_category_") {
                    let cat = self.item_category.get(pushed).map(String::as_str).unwrap_or("");
                    self.pref_category.scores(user, cat)[w.index()]
                } else {
                    return Err(bad_slot(name));
                }
            }
            Family::ProductProduct => {
                if name == "comp_item" {
                    self.product_scores.complementarity(anchor, pushed)
                } else if name == "comp_category" {
                    let a_cat = self.item_category.get(anchor).map(String::as_str).unwrap_or("");
                    let p_cat = self.item_category.get(pushed).map(String::as_str).unwrap_or("");
                    self.category_scores.complementarity(a_cat, p_cat)
                } else {
                    return Err(bad_slot(name));
                }
            }
        };
        Ok(value)
    }

    /// Assemble both feature vectors for a (user, anchor, pushed) triple.
    /// Unknown users are tolerated when `allow_cold` is set: their user slots
    /// are zeroed and the cold-start slot raised.
    pub fn assemble_vectors(
        &self,
        user: &str,
        anchor: &str,
        pushed: &str,
        allow_cold: bool,
    ) -> Result<std::result::Result<(Vec<f64>, Vec<f64>, bool), DropReason>> {
        let profile = self.profiles.get(user);
        let cold = profile.is_none();
        if cold && !allow_cold {
            return Ok(Err(DropReason::UnknownUser));
        }
        if !self.known_items.contains(pushed) || !self.known_items.contains(anchor) {
            return Ok(Err(DropReason::UnknownItem));
        }
        let mut x_hat = Vec::with_capacity(self.schema.assignment_dims());
        x_hat.push(1.0);
        for &i in &self.schema.assignment_slots() {
            x_hat.push(self.slot_value(&self.schema.slots[i], profile, cold, user, anchor, pushed)?);
        }
        let mut x = Vec::with_capacity(self.schema.prediction_dims());
        x.push(1.0);
        for &i in &self.schema.prediction_slots() {
            x.push(self.slot_value(&self.schema.slots[i], profile, cold, user, anchor, pushed)?);
        }
        Ok(Ok((x_hat, x, cold)))
    }

    /// Turn one impression into an example, or report why it was dropped.
    pub fn assemble_example(
        &self,
        imp: &PushImpression,
    ) -> Result<std::result::Result<Example, DropReason>> {
        if imp.timestamp <= self.ref_time {
            return Ok(Err(DropReason::NotAfterRefTime));
        }
        match self.assemble_vectors(&imp.user_id, &imp.anchor_item_id, &imp.pushed_item_id, false)? {
            Ok((x_hat, x, _)) => Ok(Ok(Example {
                x_hat,
                x,
                y: imp.opened,
                user_id: imp.user_id.clone(),
                anchor_item_id: imp.anchor_item_id.clone(),
                pushed_item_id: imp.pushed_item_id.clone(),
            })),
            Err(reason) => Ok(Err(reason)),
        }
    }

    /// Assemble a batch; dropped impressions are counted per reason.
    pub fn assemble_batch(
        &self,
        impressions: &[PushImpression],
    ) -> Result<(Vec<Example>, BTreeMap<DropReason, usize>)> {
        let mut examples = Vec::with_capacity(impressions.len());
        let mut drops: BTreeMap<DropReason, usize> = BTreeMap::new();
        for imp in impressions {
            match self.assemble_example(imp)? {
                Ok(ex) => examples.push(ex),
                Err(reason) => *drops.entry(reason).or_default() += 1,
            }
        }
        Ok((examples, drops))
    }
}

fn bad_slot(name: &str) -> Error {
    Error::invalid(format!("unknown feature slot: {name}"))
}
