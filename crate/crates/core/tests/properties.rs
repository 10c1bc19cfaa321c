use std::collections::BTreeMap;

use proptest::prelude::*;
use riskqueue::corpus::{group_by_interval, read_histories, write_histories, Dataset, Post, Split, UserHistory};
use riskqueue::screening::{top_k_indices, Risky};
use riskqueue::stream::EvolvingQueue;

#[derive(Debug, Clone, Copy)]
struct Item(usize, f64);

impl Risky for Item {
    fn risk(&self) -> f64 {
        self.1
    }
}

fn arb_text() -> impl Strategy<Value = String> {
    prop_oneof![
        "[a-zA-Z ]{0,12}[a-z]{1,8}",
        "[a-z]{1,6} \"quoted\" \\\\ é ü 中文",
        Just("tab\tand\nnewline".to_string()),
    ]
}

fn arb_dataset() -> impl Strategy<Value = Dataset> {
    prop::collection::vec(
        (
            prop::collection::vec((0i64..2_000_000_000, arb_text(), prop::option::of("[a-z]{1,5}")), 1..8),
            prop::option::of(0u8..=1),
            prop::sample::select(vec![Split::Train, Split::Validation, Split::Test]),
        ),
        1..6,
    )
    .prop_map(|users| {
        let mut split = BTreeMap::new();
        let histories = users
            .into_iter()
            .enumerate()
            .map(|(u, (posts, label, s))| {
                let user_id = format!("u{u}");
                split.insert(user_id.clone(), s);
                let posts = posts
                    .into_iter()
                    .enumerate()
                    .map(|(i, (ts, text, title))| Post {
                        user_id: user_id.clone(),
                        post_id: format!("p{i}"),
                        timestamp: ts,
                        title,
                        text,
                    })
                    .collect();
                UserHistory::new(user_id, posts, label).unwrap()
            })
            .collect();
        Dataset::from_users(histories, split).unwrap()
    })
}

fn risks_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop_oneof![
        prop::collection::vec(0.0f64..1.0, 0..200),
        prop::collection::vec((0u8..4).prop_map(|v| f64::from(v) / 4.0), 0..200),
    ]
}

proptest! {
    #[test]
    fn load_write_load_is_identity(d in arb_dataset()) {
        let mut buf = Vec::new();
        write_histories(&d, &mut buf).unwrap();
        let back = read_histories(buf.as_slice(), "mem".as_ref()).unwrap();
        prop_assert_eq!(&back, &d);
        let mut again = Vec::new();
        write_histories(&back, &mut again).unwrap();
        prop_assert_eq!(again, buf);
    }

    #[test]
    fn groups_partition_history(
        offsets in prop::collection::vec(0i64..200 * 86_400, 0..60),
        interval in 1u32..30,
    ) {
        let posts = offsets
            .iter()
            .enumerate()
            .map(|(i, &ts)| Post {
                user_id: "u".into(),
                post_id: format!("p{i:03}"),
                timestamp: ts,
                title: None,
                text: "x".into(),
            })
            .collect();
        let h = UserHistory::new("u", posts, None).unwrap();
        let groups = group_by_interval(&h, interval).unwrap();
        let flat: Vec<Post> = groups.iter().flat_map(|g| g.posts.clone()).collect();
        prop_assert_eq!(&flat, &h.posts);
        let span = i64::from(interval) * 86_400;
        for g in &groups {
            prop_assert_eq!(g.start, g.posts[0].timestamp);
            prop_assert!(g.posts.iter().all(|p| p.timestamp - g.start < span));
        }
        for w in groups.windows(2) {
            prop_assert!(w[1].start - w[0].start >= span);
        }
    }

    #[test]
    fn queue_invariants_hold(risks in risks_strategy(), k in 1usize..20) {
        let mut q = EvolvingQueue::new(k).unwrap();
        let mut mutations = 0;
        for (i, &r) in risks.iter().enumerate() {
            if q.update(Item(i, r)) {
                mutations += 1;
            }
            prop_assert!(q.len() <= k);
            let idx: Vec<usize> = q.entries().iter().map(|e| e.0).collect();
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            let true_min = q.entries().iter().map(|e| e.1).fold(f64::INFINITY, f64::min);
            prop_assert_eq!(q.min_risk(), Some(true_min));
        }
        let ids: Vec<usize> = q.entries().iter().map(|e| e.0).collect();
        prop_assert_eq!(ids, top_k_indices(&risks, k));
        prop_assert!(mutations <= risks.len());
    }

    #[test]
    fn larger_queues_never_infer_less(risks in risks_strategy(), k in 1usize..32) {
        let count = |cap: usize| {
            let mut q = EvolvingQueue::new(cap).unwrap();
            risks.iter().filter(|&&r| q.update(r)).count()
        };
        prop_assert!(count(k + 1) >= count(k));
    }
}
