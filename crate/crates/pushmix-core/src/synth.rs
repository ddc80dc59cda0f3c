//! Synthetic interaction logs and impressions with planted mixture
//! parameters, so training has a recoverable target and policies can be
//! simulated against known open probabilities.
//!
//! Two generation paths: [`sample_examples`] draws feature vectors directly
//! from the planted model (fast, dimension-free), while [`generate`] builds a
//! whole world of events, impressions, catalog and demographics that the real
//! ingestion -> scoring -> featurization pipeline can chew through; labels
//! are then sampled from the planted model on the actually-assembled
//! features.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{
    CatalogRecord, DemographicsRecord, Example, FeatureConfig, FeatureSchema, FeatureSources,
};
use crate::ingest::{EventKind, InteractionEvent, PushImpression};
use crate::mixture::MixtureParams;
use crate::rng::{mix_seed, sample_normal};

const DAY_SECS: i64 = 86_400;

/// Knobs of the synthetic world.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    pub categories: usize,
    /// Planted context count M*.
    pub true_contexts: usize,
    pub impressions: usize,
    pub seed: u64,
    /// Scale of random variation in planted behavior.
    pub feature_noise: f64,
    /// Cluster count of the generated schema.
    pub user_clusters: usize,
    pub ref_time: i64,
    /// Planted assignment weights; defaults to the activity-driven pattern.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_star: Option<Vec<Vec<f64>>>,
    /// Planted prediction weights; defaults to the pattern where active-user
    /// contexts weight preference slots and inactive ones weight
    /// complementarity slots.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi_star: Option<Vec<Vec<f64>>>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            users: 300,
            items: 120,
            categories: 8,
            true_contexts: 2,
            impressions: 4000,
            seed: 7,
            feature_noise: 1.0,
            user_clusters: 4,
            ref_time: 200 * DAY_SECS,
            theta_star: None,
            psi_star: None,
        }
    }
}

/// The planted model and the schema its dimensions refer to.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub params: MixtureParams,
    pub schema: FeatureSchema,
}

/// Everything the generator emits.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub events: Vec<InteractionEvent>,
    pub impressions: Vec<PushImpression>,
    pub catalog: Vec<CatalogRecord>,
    pub demographics: Vec<DemographicsRecord>,
    pub truth: GroundTruth,
    /// The impressions featurized through the real pipeline, labels included.
    pub examples: Vec<Example>,
    /// Feature sources at the reference time, reusable by evaluation.
    pub sources: FeatureSources,
}

fn set_slot(row: &mut [f64], idx: Option<usize>, value: f64) {
    if let Some(i) = idx {
        row[i] = value;
    }
}

/// The default planted pattern over a schema: contexts are driven purely by
/// user activity (assignment weights live on user slots only), the most
/// active context weights preference slots, the least active weights
/// complementarity slots, and everyone mildly favors popular products.
pub fn planted_pattern(schema: &FeatureSchema, contexts: usize) -> Result<MixtureParams> {
    if contexts == 0 {
        return Err(Error::invalid("context count must be at least 1"));
    }
    let m = schema.assignment_dims();
    let n = schema.prediction_dims();
    let active = schema.x_hat_index("user_active_score");
    let mut params = MixtureParams::zeros(contexts, m, n);
    for (k, row) in params.theta.iter_mut().enumerate() {
        // context k selects a band of user activity; the pinned last context
        // catches the least active users
        let strength = 6.0 * (contexts - 1 - k) as f64 / (contexts - 1).max(1) as f64 + 2.0;
        row[0] = -0.5 * strength;
        set_slot(row, active, strength);
    }
    for (k, row) in params.psi.iter_mut().enumerate() {
        // blend from preference-driven (k = 0, most active) to
        // complementarity-driven (k = M-1, least active)
        let t = if contexts == 1 {
            0.5
        } else {
            k as f64 / (contexts - 1) as f64
        };
        row[0] = 1.2; // base open rate below one half
        for w in ["1d", "2d", "7d", "28d"] {
            set_slot(row, schema.x_index(&format!("pref_item_{w}")), -2.2 * (1.0 - t));
            set_slot(row, schema.x_index(&format!("pref_category_{w}")), -0.8 * (1.0 - t));
        }
        set_slot(row, schema.x_index("comp_item"), -3.0 * t);
        set_slot(row, schema.x_index("comp_category"), -1.2 * t);
        set_slot(row, schema.x_index("product_sales_28d"), -0.6);
    }
    Ok(params)
}

/// Draw examples straight from the planted model: features are iid normal
/// around zero (bias slot fixed at 1), the context is sampled from the
/// assignment softmax and the label from the context's logistic expert.
pub fn sample_examples(
    truth: &MixtureParams,
    count: usize,
    feature_scale: f64,
    seed: u64,
) -> Result<Vec<Example>> {
    truth.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut x_hat = vec![1.0];
        x_hat.extend((1..truth.m).map(|_| feature_scale * sample_normal(&mut rng)));
        let mut x = vec![1.0];
        x.extend((1..truth.n).map(|_| feature_scale * sample_normal(&mut rng)));
        let (_, y) = sample_label(truth, &x_hat, &x, &mut rng)?;
        out.push(Example {
            x_hat,
            x,
            y,
            user_id: format!("synthetic_{i}"),
            anchor_item_id: String::new(),
            pushed_item_id: String::new(),
        });
    }
    Ok(out)
}

/// Sample (context, label) from the planted model for given features.
pub fn sample_label(
    truth: &MixtureParams,
    x_hat: &[f64],
    x: &[f64],
    rng: &mut impl Rng,
) -> Result<(usize, u8)> {
    let assign = truth.assignment_probs(x_hat)?;
    let mut pick = rng.random::<f64>();
    let mut context = truth.contexts - 1;
    for (k, a) in assign.iter().enumerate() {
        if pick < *a {
            context = k;
            break;
        }
        pick -= a;
    }
    let open = crate::mixture::open_probability(&truth.psi[context], x)?;
    let y = u8::from(rng.random::<f64>() < open);
    Ok((context, y))
}

/// Generate the full synthetic world.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    if spec.users == 0 || spec.items == 0 || spec.categories == 0 {
        return Err(Error::invalid("users, items and categories must be positive"));
    }
    if spec.true_contexts == 0 {
        return Err(Error::invalid("true context count must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, 0));
    let schema = FeatureSchema::default_schema(spec.user_clusters);

    let truth_params = match (&spec.theta_star, &spec.psi_star) {
        (Some(theta), Some(psi)) => {
            let mut p = MixtureParams::zeros(
                spec.true_contexts,
                schema.assignment_dims(),
                schema.prediction_dims(),
            );
            p.theta = theta.clone();
            p.psi = psi.clone();
            p.validate()?;
            p
        }
        (None, None) => planted_pattern(&schema, spec.true_contexts)?,
        _ => {
            return Err(Error::invalid(
                "theta_star and psi_star must be given together or not at all",
            ))
        }
    };
    let truth_params = truth_params.with_schema_hash(schema.hash());

    // --- world structure ------------------------------------------------
    let item_id = |i: usize| format!("i{i:04}");
    let user_id = |u: usize| format!("u{u:04}");
    let category_of = |i: usize| format!("c{:02}", i % spec.categories);

    // Zipf-flavored item popularity within a random permutation
    let mut pop_rank: Vec<usize> = (0..spec.items).collect();
    for i in (1..pop_rank.len()).rev() {
        pop_rank.swap(i, rng.random_range(0..=i));
    }
    let mut weights = vec![0.0; spec.items];
    for (rank, &item) in pop_rank.iter().enumerate() {
        weights[item] = 1.0 / (1.0 + rank as f64);
    }
    let items_by_category: BTreeMap<String, Vec<usize>> = {
        let mut map: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for i in 0..spec.items {
            map.entry(category_of(i)).or_default().push(i);
        }
        map
    };
    let pick_weighted = |rng: &mut ChaCha8Rng, pool: &[usize], weights: &[f64]| -> usize {
        let total: f64 = pool.iter().map(|&i| weights[i]).sum();
        let mut target = rng.random::<f64>() * total;
        for &i in pool {
            if target < weights[i] {
                return i;
            }
            target -= weights[i];
        }
        *pool.last().expect("non-empty pool")
    };

    // --- interaction events ----------------------------------------------
    let window_start = spec.ref_time - 28 * DAY_SECS;
    let all_items: Vec<usize> = (0..spec.items).collect();
    let mut events = Vec::new();
    let mut demographics = Vec::new();
    for u in 0..spec.users {
        let uid = user_id(u);
        let activity: f64 = rng.random::<f64>().powf(1.5);
        let count = 3 + (activity * 40.0 * spec.feature_noise.max(0.1)) as usize;
        let favorite_a = format!("c{:02}", rng.random_range(0..spec.categories));
        let favorite_b = format!("c{:02}", rng.random_range(0..spec.categories));
        demographics.push(DemographicsRecord {
            user_id: uid.clone(),
            age_bucket: rng.random_range(0..4),
            income_bucket: rng.random_range(0..4),
        });
        for _ in 0..count {
            let in_favorite = rng.random::<f64>() < 0.7;
            let pool = if in_favorite {
                let cat = if rng.random::<f64>() < 0.5 {
                    &favorite_a
                } else {
                    &favorite_b
                };
                items_by_category.get(cat).expect("category exists")
            } else {
                &all_items
            };
            let item = pick_weighted(&mut rng, pool, &weights);
            let is_purchase = rng.random::<f64>() < 0.4;
            let ts = window_start + rng.random_range(0..(28 * DAY_SECS - 2)).max(0);
            events.push(InteractionEvent {
                user_id: uid.clone(),
                item_id: item_id(item),
                category_id: category_of(item),
                kind: if is_purchase {
                    EventKind::Purchase
                } else {
                    EventKind::View
                },
                timestamp: ts,
            });
            // planted complement: a purchase often triggers a companion
            // purchase in the next category shortly after
            if is_purchase && rng.random::<f64>() < 0.35 {
                let companion_cat = format!("c{:02}", (item % spec.categories + 1) % spec.categories);
                let pool = items_by_category.get(&companion_cat).expect("category exists");
                let companion = pick_weighted(&mut rng, pool, &weights);
                events.push(InteractionEvent {
                    user_id: uid.clone(),
                    item_id: item_id(companion),
                    category_id: category_of(companion),
                    kind: EventKind::Purchase,
                    timestamp: ts + 1 + rng.random_range(0..DAY_SECS),
                });
            }
        }
    }
    events.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.user_id.cmp(&b.user_id)));

    let catalog: Vec<CatalogRecord> = (0..spec.items)
        .map(|i| CatalogRecord {
            item_id: item_id(i),
            price: ((1.0 + 2.0 * weights[i]) * (5.0 + 95.0 * rng.random::<f64>() * spec.feature_noise))
                .round(),
        })
        .collect();

    // --- feature sources ---------------------------------------------------
    let catalog_map: BTreeMap<String, f64> =
        catalog.iter().map(|c| (c.item_id.clone(), c.price)).collect();
    let demo_map: BTreeMap<String, (usize, usize)> = demographics
        .iter()
        .map(|d| (d.user_id.clone(), (d.age_bucket, d.income_bucket)))
        .collect();
    let sources = FeatureSources::build(
        &events,
        &catalog_map,
        &demo_map,
        spec.ref_time,
        schema.clone(),
        &FeatureConfig::default(),
    )?;

    // --- impressions with planted labels -----------------------------------
    let mut purchases_by_user: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for ev in &events {
        if ev.kind == EventKind::Purchase {
            let list = purchases_by_user.entry(ev.user_id.clone()).or_default();
            if !list.contains(&ev.item_id) {
                list.push(ev.item_id.clone());
            }
        }
    }
    let buyers: Vec<&String> = purchases_by_user.keys().collect();
    if buyers.is_empty() {
        return Err(Error::invalid("generated world has no purchases"));
    }
    let mut impressions = Vec::with_capacity(spec.impressions);
    let mut examples = Vec::with_capacity(spec.impressions);
    for idx in 0..spec.impressions {
        let user = buyers[rng.random_range(0..buyers.len())].clone();
        let anchors = &purchases_by_user[&user];
        let anchor = anchors[rng.random_range(0..anchors.len())].clone();
        let pushed = if rng.random::<f64>() < 0.7 {
            let cands = sources
                .product_scores
                .select_candidates(&anchor, 0.0, 0.1, 10)?;
            if cands.is_empty() {
                item_id(rng.random_range(0..spec.items))
            } else {
                cands[rng.random_range(0..cands.len())].candidate.clone()
            }
        } else {
            item_id(rng.random_range(0..spec.items))
        };
        let ts = spec.ref_time + 1 + idx as i64;
        let (x_hat, x, _) = sources
            .assemble_vectors(&user, &anchor, &pushed, false)?
            .map_err(|r| Error::invalid(format!("generator produced a dropped impression: {r}")))?;
        let (_, y) = sample_label(&truth_params, &x_hat, &x, &mut rng)?;
        impressions.push(PushImpression {
            user_id: user.clone(),
            anchor_item_id: anchor.clone(),
            pushed_item_id: pushed.clone(),
            opened: y,
            timestamp: ts,
        });
        examples.push(Example {
            x_hat,
            x,
            y,
            user_id: user,
            anchor_item_id: anchor,
            pushed_item_id: pushed,
        });
    }

    Ok(SyntheticData {
        events,
        impressions,
        catalog,
        demographics,
        truth: GroundTruth {
            params: truth_params,
            schema,
        },
        examples,
        sources,
    })
}
