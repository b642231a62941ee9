use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Training classes and named test subsets; the two universes never overlap.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    train_classes: Vec<String>,
    test_subsets: Vec<(String, Vec<String>)>,
}

/// Which class universe an episode is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Train,
    /// Index into [`SplitSpec::test_subsets`].
    Test(usize),
}

impl SplitSpec {
    pub fn new(train_classes: Vec<String>, test_subsets: Vec<(String, Vec<String>)>) -> Result<Self> {
        let train: BTreeSet<&str> = train_classes.iter().map(String::as_str).collect();
        if train.len() != train_classes.len() {
            return Err(Error::Split("duplicate training class".into()));
        }
        let mut seen = BTreeSet::new();
        for (name, classes) in &test_subsets {
            for c in classes {
                if train.contains(c.as_str()) {
                    return Err(Error::Split(format!(
                        "class `{c}` of test subset `{name}` is also a training class"
                    )));
                }
                if !seen.insert(c.as_str()) {
                    return Err(Error::Split(format!("class `{c}` appears in two test subsets")));
                }
            }
        }
        Ok(Self {
            train_classes,
            test_subsets,
        })
    }

    pub fn train_classes(&self) -> &[String] {
        &self.train_classes
    }

    pub fn test_subsets(&self) -> &[(String, Vec<String>)] {
        &self.test_subsets
    }

    pub fn test_classes(&self) -> Vec<&str> {
        self.test_subsets
            .iter()
            .flat_map(|(_, c)| c.iter().map(String::as_str))
            .collect()
    }

    pub fn is_test_class(&self, class: &str) -> bool {
        self.test_subsets.iter().any(|(_, c)| c.iter().any(|x| x == class))
    }

    pub fn classes(&self, phase: Phase) -> Result<&[String]> {
        match phase {
            Phase::Train => Ok(&self.train_classes),
            Phase::Test(i) => self
                .test_subsets
                .get(i)
                .map(|(_, c)| c.as_slice())
                .ok_or_else(|| Error::Split(format!("no test subset {i}"))),
        }
    }

    pub fn subset_name(&self, phase: Phase) -> &str {
        match phase {
            Phase::Train => "train",
            Phase::Test(i) => self.test_subsets.get(i).map(|(n, _)| n.as_str()).unwrap_or("?"),
        }
    }

    /// First `n_train` class names for training, the rest as one test subset
    /// named `"0"`.
    pub fn holdout(classes: &[String], n_train: usize) -> Result<Self> {
        if n_train == 0 || n_train >= classes.len() {
            return Err(Error::Split(format!(
                "cannot hold out with {n_train} of {} training classes",
                classes.len()
            )));
        }
        Self::new(
            classes[..n_train].to_vec(),
            vec![("0".into(), classes[n_train..].to_vec())],
        )
    }
}

/// The 47 DTD categories in their canonical (alphabetical) order.
pub const DTD_CLASSES: [&str; 47] = [
    "banded", "blotchy", "braided", "bubbly", "bumpy", "chequered", "cobwebbed", "cracked",
    "crosshatched", "crystalline", "dotted", "fibrous", "flecked", "freckled", "frilly", "gauzy",
    "grid", "grooved", "honeycombed", "interlaced", "knitted", "lacelike", "lined", "marbled",
    "matted", "meshed", "paisley", "perforated", "pitted", "pleated", "polka-dotted", "porous",
    "potholed", "scaly", "smeared", "spiralled", "sprinkled", "stained", "stratified", "striped",
    "studded", "swirly", "veined", "waffled", "woven", "wrinkled", "zigzagged",
];

/// Held-out DTD subsets `i = 0, 1, 2`.
pub const DTD_TEST_SUBSETS: [[&str; 5]; 3] = [
    ["perforated", "pitted", "pleated", "polka-dotted", "porous"],
    ["stained", "stratified", "striped", "studded", "swirly"],
    ["veined", "waffled", "woven", "wrinkled", "zigzagged"],
];

/// Three five-class test subsets; the remaining 32 DTD classes train.
pub fn dtd_split() -> SplitSpec {
    let test: BTreeSet<&str> = DTD_TEST_SUBSETS.iter().flatten().copied().collect();
    let train = DTD_CLASSES
        .iter()
        .filter(|c| !test.contains(*c))
        .map(|c| c.to_string())
        .collect();
    let subsets = DTD_TEST_SUBSETS
        .iter()
        .enumerate()
        .map(|(i, s)| (i.to_string(), s.iter().map(|c| c.to_string()).collect()))
        .collect();
    SplitSpec::new(train, subsets).expect("DTD split is disjoint")
}
