//! Seeded synthetic corpora: positive users mix perturbed template
//! statements into neutral chatter, negative users post chatter with an
//! occasional risky-sounding decoy.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Post, Split, UserHistory};
use crate::error::{Error, Result};
use crate::templates::preset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_users: usize,
    pub posts_per_user: usize,
    /// Fraction of users labeled positive.
    pub positive_fraction: f64,
    /// Per-token dropout and insertion rate applied to template posts.
    pub noise_rate: f64,
    /// Fraction of a positive user's posts derived from templates.
    pub risky_rate: f64,
    /// Rate of decoy template posts in negative histories.
    pub decoy_rate: f64,
    /// Template preset the risky posts are drawn from.
    pub template_set: String,
    /// Epoch seconds of the earliest possible post.
    pub start_timestamp: i64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_users: 400,
            posts_per_user: 100,
            positive_fraction: 0.3,
            noise_rate: 0.15,
            risky_rate: 0.25,
            decoy_rate: 0.02,
            template_set: "full".into(),
            start_timestamp: 1_420_070_400,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 {
            return Err(Error::Config("n_users must be at least 1".into()));
        }
        if self.posts_per_user == 0 {
            return Err(Error::Config("posts_per_user must be at least 1".into()));
        }
        for (name, v) in [
            ("positive_fraction", self.positive_fraction),
            ("noise_rate", self.noise_rate),
            ("risky_rate", self.risky_rate),
            ("decoy_rate", self.decoy_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

const SUBJECTS: &[&str] = &["I", "We", "My friend", "My brother", "Our team", "My neighbor", "The class"];
const VERBS: &[&str] = &[
    "visited", "watched", "cooked", "painted", "fixed", "planned", "found", "built", "read", "ordered",
];
const OBJECTS: &[&str] = &[
    "a new recipe", "the old bike", "a documentary", "the garden fence", "a board game", "the local market",
    "a science podcast", "the museum exhibit", "a pasta dinner", "the hiking trail", "a vintage camera",
    "the weekend schedule", "a comic book", "the kitchen shelf",
];
const TAILS: &[&str] = &[
    "this morning", "after work", "on Saturday", "with some friends", "for the first time", "last night",
    "before lunch", "during the trip", "at the park", "downtown",
];
const REMARKS: &[&str] = &[
    "Anyone have tips?",
    "Pretty interesting overall.",
    "Would recommend it.",
    "The weather was nice too.",
    "Planning to try again next week.",
    "Took a few photos.",
    "It took longer than expected.",
    "Curious what others think.",
];
const INSERTIONS: &[&str] = &[
    "really", "just", "so", "honestly", "lately", "always", "sad", "hopeless", "tired", "alone", "worthless",
    "crying", "empty", "miserable",
];

fn filler(rng: &mut ChaCha8Rng) -> String {
    let mut text = format!(
        "{} {} {} {}.",
        SUBJECTS.choose(rng).unwrap(),
        VERBS.choose(rng).unwrap(),
        OBJECTS.choose(rng).unwrap(),
        TAILS.choose(rng).unwrap()
    );
    if rng.gen_bool(0.6) {
        text.push(' ');
        text.push_str(REMARKS.choose(rng).unwrap());
    }
    text
}

/// Token dropout and insertion, each at `rate`; never returns an empty text.
fn perturb(template: &str, rate: f64, rng: &mut ChaCha8Rng) -> String {
    let mut out: Vec<&str> = Vec::new();
    for tok in template.split_whitespace() {
        if !rng.gen_bool(rate) {
            out.push(tok);
        }
        if rng.gen_bool(rate) {
            out.push(INSERTIONS.choose(rng).unwrap());
        }
    }
    if out.is_empty() {
        return template.to_string();
    }
    out.join(" ")
}

/// Generates a labeled dataset with a stratified 60/20/20
/// train/validation/test split. Deterministic in the config.
pub fn synth_generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let set = preset(&config.template_set)?;
    let templates: Vec<&str> = set.iter().map(|t| t.text.as_str()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let n_pos = (config.positive_fraction * config.n_users as f64).round() as usize;
    let mut labels: Vec<u8> = (0..config.n_users).map(|i| u8::from(i < n_pos)).collect();
    labels.shuffle(&mut rng);

    let mut users = Vec::with_capacity(config.n_users);
    for (u, &label) in labels.iter().enumerate() {
        let user_id = format!("user{u:04}");
        let risky_rate = if label == 1 { config.risky_rate } else { config.decoy_rate };
        let mut t = config.start_timestamp + rng.gen_range(0..30 * 86_400);
        let posts = (0..config.posts_per_user)
            .map(|j| {
                t += rng.gen_range(3_600..3 * 86_400);
                let text = if rng.gen_bool(risky_rate) {
                    perturb(templates.choose(&mut rng).unwrap(), config.noise_rate, &mut rng)
                } else {
                    filler(&mut rng)
                };
                Post {
                    user_id: user_id.clone(),
                    post_id: format!("{user_id}-{j:04}"),
                    timestamp: t,
                    title: None,
                    text,
                }
            })
            .collect();
        users.push(UserHistory::new(user_id, posts, Some(label))?);
    }

    let mut split = BTreeMap::new();
    for class in [0u8, 1] {
        let mut ids: Vec<&str> = users
            .iter()
            .filter(|h| h.label == Some(class))
            .map(|h| h.user_id.as_str())
            .collect();
        ids.shuffle(&mut rng);
        let n = ids.len();
        let (train_end, val_end) = (n * 6 / 10, n * 8 / 10);
        for (i, id) in ids.into_iter().enumerate() {
            let s = if i < train_end {
                Split::Train
            } else if i < val_end {
                Split::Validation
            } else {
                Split::Test
            };
            split.insert(id.to_string(), s);
        }
    }
    Dataset::from_users(users, split)
}
