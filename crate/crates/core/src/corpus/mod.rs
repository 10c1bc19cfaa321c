//! Posting histories: the record format, loading and writing, and temporal
//! grouping of a history into fixed-width windows.

mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub use synth::{synth_generate, SynthConfig};

pub const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Post {
    pub user_id: String,
    pub post_id: String,
    /// Seconds since the Unix epoch, UTC.
    pub timestamp: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub text: String,
}

impl Post {
    /// Text handed to the sentence encoder: `title + "\n" + text` when a
    /// title exists.
    pub fn encoder_text(&self) -> String {
        match &self.title {
            Some(title) if !title.trim().is_empty() => format!("{title}\n{}", self.text),
            _ => self.text.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "valid" | "dev" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserHistory {
    pub user_id: String,
    /// Ascending by `(timestamp, post_id)`.
    pub posts: Vec<Post>,
    pub label: Option<u8>,
}

impl UserHistory {
    /// Builds a history, sorting posts chronologically and checking that
    /// every post belongs to `user_id` and that post ids are unique.
    pub fn new(user_id: impl Into<String>, mut posts: Vec<Post>, label: Option<u8>) -> Result<Self> {
        let user_id = user_id.into();
        if let Some(l) = label {
            if l > 1 {
                return Err(Error::InvalidInput(format!("label must be 0 or 1, got {l}")));
            }
        }
        let mut seen = HashSet::with_capacity(posts.len());
        for post in &posts {
            if post.user_id != user_id {
                return Err(Error::InvalidInput(format!(
                    "post {:?} belongs to {:?}, not {:?}",
                    post.post_id, post.user_id, user_id
                )));
            }
            if !seen.insert(post.post_id.as_str()) {
                return Err(Error::DuplicatePost {
                    user_id: user_id.clone(),
                    post_id: post.post_id.clone(),
                });
            }
        }
        sort_chronologically(&mut posts);
        Ok(Self { user_id, posts, label })
    }

    pub fn len(&self) -> usize {
        self.posts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posts.is_empty()
    }
}

pub fn sort_chronologically(posts: &mut [Post]) {
    posts.sort_by(|a, b| {
        a.timestamp
            .cmp(&b.timestamp)
            .then_with(|| a.post_id.cmp(&b.post_id))
    });
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Dataset {
    /// Sorted by user id.
    pub users: Vec<UserHistory>,
    pub split: BTreeMap<String, Split>,
}

impl Dataset {
    pub fn from_users(users: Vec<UserHistory>, split: BTreeMap<String, Split>) -> Result<Self> {
        let mut users = users;
        users.sort_by(|a, b| a.user_id.cmp(&b.user_id));
        for pair in users.windows(2) {
            if pair[0].user_id == pair[1].user_id {
                return Err(Error::InvalidInput(format!("user {:?} appears twice", pair[0].user_id)));
            }
        }
        if split.len() != users.len() || users.iter().any(|u| !split.contains_key(&u.user_id)) {
            return Err(Error::InvalidInput(
                "every user must be assigned to exactly one split".into(),
            ));
        }
        Ok(Self { users, split })
    }

    pub fn split_of(&self, user_id: &str) -> Option<Split> {
        self.split.get(user_id).copied()
    }

    pub fn users_in(&self, split: Split) -> impl Iterator<Item = &UserHistory> {
        self.users
            .iter()
            .filter(move |u| self.split.get(&u.user_id) == Some(&split))
    }

    pub fn user(&self, user_id: &str) -> Option<&UserHistory> {
        self.users
            .binary_search_by(|u| u.user_id.as_str().cmp(user_id))
            .ok()
            .map(|i| &self.users[i])
    }

    pub fn num_posts(&self) -> usize {
        self.users.iter().map(UserHistory::len).sum()
    }

    pub fn labels(&self) -> BTreeMap<String, u8> {
        self.users
            .iter()
            .filter_map(|u| u.label.map(|l| (u.user_id.clone(), l)))
            .collect()
    }
}

/// One line of the history file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostRecord {
    pub user_id: String,
    pub post_id: String,
    pub timestamp: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

/// Reads line-delimited JSON post records into a [`Dataset`].
///
/// Users without a `split` field are assigned to `train`. Blank lines are
/// skipped. Errors carry the 1-based line number of the offending record.
pub fn load_histories(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    read_histories(reader, path)
}

pub fn read_histories<R: BufRead>(reader: R, origin: &Path) -> Result<Dataset> {
    let at = |line: usize, message: String| Error::Record {
        path: origin.to_path_buf(),
        line,
        message,
    };

    struct Pending {
        posts: Vec<Post>,
        ids: HashSet<String>,
        label: Option<u8>,
        split: Option<Split>,
    }
    let mut pending: BTreeMap<String, Pending> = BTreeMap::new();

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value =
            serde_json::from_str(&line).map_err(|e| at(lineno, format!("malformed record: {e}")))?;
        let record = parse_record(&value).map_err(|m| at(lineno, m))?;

        let entry = pending.entry(record.user_id.clone()).or_insert_with(|| Pending {
            posts: Vec::new(),
            ids: HashSet::new(),
            label: None,
            split: None,
        });
        if !entry.ids.insert(record.post_id.clone()) {
            return Err(at(
                lineno,
                Error::DuplicatePost {
                    user_id: record.user_id,
                    post_id: record.post_id,
                }
                .to_string(),
            ));
        }
        merge_field(&mut entry.label, record.label, "label").map_err(|m| at(lineno, m))?;
        merge_field(&mut entry.split, record.split, "split").map_err(|m| at(lineno, m))?;
        entry.posts.push(Post {
            user_id: record.user_id,
            post_id: record.post_id,
            timestamp: record.timestamp,
            title: record.title,
            text: record.text,
        });
    }

    let mut users = Vec::with_capacity(pending.len());
    let mut split = BTreeMap::new();
    for (user_id, p) in pending {
        split.insert(user_id.clone(), p.split.unwrap_or(Split::Train));
        users.push(UserHistory::new(user_id, p.posts, p.label)?);
    }
    Dataset::from_users(users, split)
}

fn merge_field<T: PartialEq + fmt::Debug + Copy>(
    slot: &mut Option<T>,
    incoming: Option<T>,
    name: &str,
) -> std::result::Result<(), String> {
    match (*slot, incoming) {
        (_, None) => Ok(()),
        (None, Some(v)) => {
            *slot = Some(v);
            Ok(())
        }
        (Some(a), Some(b)) if a == b => Ok(()),
        (Some(a), Some(b)) => Err(format!("conflicting {name} for user: {a:?} vs {b:?}")),
    }
}

fn parse_record(value: &Value) -> std::result::Result<PostRecord, String> {
    let obj = value
        .as_object()
        .ok_or_else(|| "malformed record: expected a JSON object".to_string())?;
    let string_field = |name: &str| -> std::result::Result<String, String> {
        match obj.get(name) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(format!("malformed record: field {name:?} must be a string")),
            None => Err(format!("malformed record: missing field {name:?}")),
        }
    };

    let user_id = string_field("user_id")?;
    let post_id = string_field("post_id")?;
    if user_id.is_empty() || post_id.is_empty() {
        return Err("malformed record: user_id and post_id must be non-empty".into());
    }
    let text = string_field("text")?;
    if text.trim().is_empty() {
        return Err(format!("empty text for post {post_id:?}"));
    }
    let timestamp = match obj.get("timestamp") {
        Some(v) => parse_timestamp(v).ok_or_else(|| format!("unparsable timestamp {v}"))?,
        None => return Err("malformed record: missing field \"timestamp\"".into()),
    };
    let title = match obj.get("title") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err("malformed record: field \"title\" must be a string".into()),
    };
    let label = match obj.get("label") {
        None | Some(Value::Null) => None,
        Some(v) => match v.as_u64() {
            Some(l @ (0 | 1)) => Some(l as u8),
            _ => return Err(format!("label must be 0 or 1, got {v}")),
        },
    };
    let split = match obj.get("split") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.parse::<Split>().map_err(|e| e.to_string())?),
        Some(v) => return Err(format!("malformed record: bad split {v}")),
    };
    Ok(PostRecord {
        user_id,
        post_id,
        timestamp,
        title,
        text,
        label,
        split,
    })
}

fn parse_timestamp(v: &Value) -> Option<i64> {
    let ts = match v {
        Value::Number(n) => n.as_i64()?,
        Value::String(s) => s.trim().parse::<i64>().ok()?,
        _ => return None,
    };
    (ts >= 0).then_some(ts)
}

/// Writes the dataset in the same line-delimited format [`load_histories`]
/// reads, users in id order and posts chronologically.
pub fn write_histories<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for user in &dataset.users {
        let split = dataset.split_of(&user.user_id);
        for post in &user.posts {
            let record = PostRecord {
                user_id: post.user_id.clone(),
                post_id: post.post_id.clone(),
                timestamp: post.timestamp,
                title: post.title.clone(),
                text: post.text.clone(),
                label: user.label,
                split,
            };
            serde_json::to_writer(&mut w, &record)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_histories(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_histories(dataset, File::create(path)?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PostGroup {
    /// Timestamp of the group's first post.
    pub start: i64,
    pub posts: Vec<Post>,
}

/// Greedy fixed-width windows: a group opens at its first post and takes
/// every following post less than `interval_days` later. A post exactly
/// `interval_days` after the group start opens a new group.
pub fn group_by_interval(history: &UserHistory, interval_days: u32) -> Result<Vec<PostGroup>> {
    if interval_days == 0 {
        return Err(Error::Config("interval_days must be at least 1".into()));
    }
    let width = i64::from(interval_days) * SECONDS_PER_DAY;
    let mut groups: Vec<PostGroup> = Vec::new();
    for post in &history.posts {
        match groups.last_mut() {
            Some(g) if post.timestamp - g.start < width => g.posts.push(post.clone()),
            _ => groups.push(PostGroup {
                start: post.timestamp,
                posts: vec![post.clone()],
            }),
        }
    }
    Ok(groups)
}
