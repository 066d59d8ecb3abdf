//! Decoder prompt assembly.
//!
//! Grammar:
//!
//! ```text
//! prompt      = prefix SP captions "." 2LF instruction
//! prefix      = "Similar images have the following captions:"
//! captions    = caption *(SP caption)
//! instruction = "Write a caption for this image:"
//! ```

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const PROMPT_PREFIX: &str = "Similar images have the following captions:";
pub const PROMPT_INSTRUCTION: &str = "Write a caption for this image:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OrderingPolicy {
    /// Retrieval order, most similar first.
    #[default]
    Decreasing,
    Increasing,
    /// Seeded Fisher-Yates shuffle.
    Random {
        seed: u64,
    },
}

impl OrderingPolicy {
    /// The policy for the `index`-th item of a batch. Random policies get a
    /// per-item seed so each item sees its own permutation.
    pub fn for_item(self, index: u64) -> Self {
        match self {
            OrderingPolicy::Random { seed } => OrderingPolicy::Random {
                seed: rng::item_seed(seed, rng::Purpose::Ordering, index),
            },
            other => other,
        }
    }
}

impl std::str::FromStr for OrderingPolicy {
    type Err = Error;

    /// `decreasing`, `increasing` or `random:<seed>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decreasing" => Ok(OrderingPolicy::Decreasing),
            "increasing" => Ok(OrderingPolicy::Increasing),
            _ => match s.strip_prefix("random:").map(str::parse) {
                Some(Ok(seed)) => Ok(OrderingPolicy::Random { seed }),
                _ => Err(Error::Config(format!(
                    "unknown ordering {s:?} (expected decreasing, increasing or random:<seed>)"
                ))),
            },
        }
    }
}

/// Reorder a best-first list according to `policy`.
pub fn order_captions<T: Clone>(captions: &[T], policy: OrderingPolicy) -> Vec<T> {
    let mut out = captions.to_vec();
    match policy {
        OrderingPolicy::Decreasing => {}
        OrderingPolicy::Increasing => out.reverse(),
        OrderingPolicy::Random { seed } => out.shuffle(&mut rng::seeded(seed)),
    }
    out
}

/// Surrounding whitespace is trimmed from each caption; everything else is
/// inserted verbatim.
pub fn build_prompt<S: AsRef<str>>(captions: &[S]) -> Result<String> {
    if captions.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    let body: Vec<&str> = captions.iter().map(|c| c.as_ref().trim()).collect();
    Ok(format!(
        "{PROMPT_PREFIX} {}.\n\n{PROMPT_INSTRUCTION}",
        body.join(" ")
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_and_pair() {
        assert_eq!(
            build_prompt(&["a dog runs"]).unwrap(),
            "Similar images have the following captions: a dog runs.\n\nWrite a caption for this image:"
        );
        assert_eq!(
            build_prompt(&["x", "y"]).unwrap(),
            "Similar images have the following captions: x y.\n\nWrite a caption for this image:"
        );
        assert!(matches!(build_prompt::<&str>(&[]), Err(Error::EmptyPrompt)));
    }

    #[test]
    fn ordering() {
        let abc = ["a", "b", "c"];
        assert_eq!(
            order_captions(&abc, OrderingPolicy::Increasing),
            ["c", "b", "a"]
        );
        assert_eq!(order_captions(&abc, OrderingPolicy::Decreasing), abc);
        for p in [
            OrderingPolicy::Decreasing,
            OrderingPolicy::Increasing,
            OrderingPolicy::Random { seed: 3 },
        ] {
            assert_eq!(order_captions(&["only"], p), ["only"]);
        }
        let abcd = ["a", "b", "c", "d"];
        let r = OrderingPolicy::Random { seed: 7 };
        assert_eq!(order_captions(&abcd, r), order_captions(&abcd, r));
    }

    #[test]
    fn parse_policy() {
        assert_eq!(
            "random:42".parse::<OrderingPolicy>().unwrap(),
            OrderingPolicy::Random { seed: 42 }
        );
        assert!("random".parse::<OrderingPolicy>().is_err());
        assert!("sideways".parse::<OrderingPolicy>().is_err());
    }

    #[test]
    fn per_item_seeds_differ() {
        let p = OrderingPolicy::Random { seed: 1 };
        assert_ne!(p.for_item(0), p.for_item(1));
        assert_eq!(
            OrderingPolicy::Increasing.for_item(5),
            OrderingPolicy::Increasing
        );
    }
}
