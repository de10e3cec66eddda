//! Seeded click-log generator with planted user preferences.
//!
//! Every user prefers one ad cluster. An impression draws a user, a cluster
//! and an ad uniformly; the click probability is `base_ctr` plus
//! `preference_sharpness` when the cluster is the user's preferred one. All
//! draws come from one ChaCha8 stream keyed by `seed`, in this order:
//! preferred cluster per user, then per impression (user, cluster, ad,
//! click uniform).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DatasetSchema, FieldSpec, Instance, RawRecord};
use crate::error::{Error, Result};

const PROB_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub num_users: usize,
    pub num_ad_clusters: usize,
    pub num_ads_per_cluster: usize,
    pub impressions: usize,
    pub preference_sharpness: f64,
    pub base_ctr: f64,
    pub seed: u64,
    pub num_buckets: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_users: 500,
            num_ad_clusters: 8,
            num_ads_per_cluster: 5,
            impressions: 200_000,
            preference_sharpness: 0.35,
            base_ctr: 0.1,
            seed: 7,
            num_buckets: 1 << 20,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0
            || self.num_ad_clusters == 0
            || self.num_ads_per_cluster == 0
            || self.impressions == 0
        {
            return Err(Error::Config("synthetic counts must all be >= 1".into()));
        }
        if !(self.base_ctr > 0.0 && self.base_ctr < 1.0) {
            return Err(Error::Config(format!(
                "base_ctr must lie in (0,1), got {}",
                self.base_ctr
            )));
        }
        if !(self.preference_sharpness >= 0.0 && self.preference_sharpness.is_finite()) {
            return Err(Error::Config(format!(
                "preference_sharpness must be finite and >= 0, got {}",
                self.preference_sharpness
            )));
        }
        Ok(())
    }

    /// Three single-valued fields: user id, ad cluster, ad id.
    pub fn schema(&self) -> Result<DatasetSchema> {
        let field = |name: &str| FieldSpec {
            name: name.to_string(),
            multivalued: false,
        };
        DatasetSchema::new(
            vec![field("user_id"), field("ad_cluster"), field("ad_id")],
            self.num_buckets,
            0,
        )
    }

    pub fn click_probability(&self, preferred: bool) -> f64 {
        let p = if preferred {
            self.base_ctr + self.preference_sharpness
        } else {
            self.base_ctr
        };
        p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
    }

    /// Expected CTR of the whole stream.
    pub fn expected_ctr(&self) -> f64 {
        let q = 1.0 / self.num_ad_clusters as f64;
        q * self.click_probability(true) + (1.0 - q) * self.click_probability(false)
    }

    /// AUC of the scorer that knows every true click probability, in the
    /// infinite-sample limit. With two probability levels the ROC has a single
    /// corner, so the area is `0.5 + 0.5 * (TPR - FPR)` at that corner.
    pub fn bayes_optimal_auc(&self) -> f64 {
        let q = 1.0 / self.num_ad_clusters as f64;
        let (hi, lo) = (self.click_probability(true), self.click_probability(false));
        if q >= 1.0 || hi == lo {
            return 0.5;
        }
        let tpr = q * hi / (q * hi + (1.0 - q) * lo);
        let fpr = q * (1.0 - hi) / (q * (1.0 - hi) + (1.0 - q) * (1.0 - lo));
        0.5 + 0.5 * (tpr - fpr)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImpression {
    pub record: RawRecord,
    pub user: usize,
    pub cluster: usize,
    pub ad: usize,
    pub click_probability: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub schema: DatasetSchema,
    pub preferred_cluster: Vec<usize>,
    /// Full stream in time order; the last `test_len` entries are the test split.
    pub impressions: Vec<SyntheticImpression>,
    pub test_len: usize,
    /// Set when the config cannot carry any preference signal.
    pub warnings: Vec<String>,
}

impl SyntheticData {
    pub fn train_len(&self) -> usize {
        self.impressions.len() - self.test_len
    }

    pub fn train_impressions(&self) -> &[SyntheticImpression] {
        &self.impressions[..self.train_len()]
    }

    pub fn test_impressions(&self) -> &[SyntheticImpression] {
        &self.impressions[self.train_len()..]
    }

    pub fn train_instances(&self) -> Vec<Instance> {
        self.train_impressions()
            .iter()
            .map(|imp| imp.record.to_instance(&self.schema))
            .collect()
    }

    pub fn test_instances(&self) -> Vec<Instance> {
        self.test_impressions()
            .iter()
            .map(|imp| imp.record.to_instance(&self.schema))
            .collect()
    }

    pub fn train_records(&self) -> Vec<RawRecord> {
        self.train_impressions()
            .iter()
            .map(|i| i.record.clone())
            .collect()
    }

    pub fn test_records(&self) -> Vec<RawRecord> {
        self.test_impressions()
            .iter()
            .map(|i| i.record.clone())
            .collect()
    }
}

/// Size of the chronological tail held out for testing: 10% rounded up,
/// leaving at least one training impression when there are two or more.
fn test_split_len(n: usize) -> usize {
    if n < 2 {
        return 0;
    }
    n.div_ceil(10).min(n - 1)
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticData> {
    config.validate()?;
    let schema = config.schema()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let preferred_cluster: Vec<usize> = (0..config.num_users)
        .map(|_| rng.gen_range(0..config.num_ad_clusters))
        .collect();

    let mut impressions = Vec::with_capacity(config.impressions);
    for _ in 0..config.impressions {
        let user = rng.gen_range(0..config.num_users);
        let cluster = rng.gen_range(0..config.num_ad_clusters);
        let ad =
            cluster * config.num_ads_per_cluster + rng.gen_range(0..config.num_ads_per_cluster);
        let p = config.click_probability(cluster == preferred_cluster[user]);
        let u: f64 = rng.gen();
        let label = u8::from(u < p);
        impressions.push(SyntheticImpression {
            record: RawRecord {
                label,
                cells: vec![
                    vec![user.to_string()],
                    vec![cluster.to_string()],
                    vec![ad.to_string()],
                ],
            },
            user,
            cluster,
            ad,
            click_probability: p,
        });
    }

    let mut warnings = Vec::new();
    if config.num_ad_clusters == 1 {
        warnings.push("degenerate config: a single ad cluster carries no preference signal".into());
    }
    if config.preference_sharpness == 0.0 {
        warnings.push("preference_sharpness is 0: labels are independent of features".into());
    }

    Ok(SyntheticData {
        schema,
        preferred_cluster,
        test_len: test_split_len(impressions.len()),
        impressions,
        warnings,
    })
}
