use std::fmt;

use super::{ClassLabel, DatasetManifest, Split};

/// Expected per-class totals and split sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpectedCounts {
    /// `(total, train, val)` in class order.
    pub per_class: [(usize, usize, usize); 4],
    /// A dataset-wide total quoted separately from the per-class table, if any.
    pub stated_total: Option<usize>,
}

impl ExpectedCounts {
    /// The shipped Training/Testing split of the public Kaggle brain-tumor
    /// MRI collection. The per-class totals sum to 7023 while the dataset
    /// is usually described as holding 7022 images; both are reported.
    pub fn kaggle_brain_tumor() -> Self {
        ExpectedCounts {
            per_class: [
                (1621, 1321, 300),
                (1645, 1339, 306),
                (1757, 1457, 300),
                (2000, 1595, 405),
            ],
            stated_total: Some(7022),
        }
    }

    pub fn table_total(&self) -> usize {
        self.per_class.iter().map(|c| c.0).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassCountCheck {
    pub class: ClassLabel,
    pub expected_total: usize,
    pub actual_total: usize,
    pub expected_train: usize,
    pub actual_train: usize,
    pub expected_val: usize,
    pub actual_val: usize,
}

impl ClassCountCheck {
    pub fn total_matches(&self) -> bool {
        self.expected_total == self.actual_total
    }

    pub fn splits_match(&self) -> bool {
        self.expected_train == self.actual_train && self.expected_val == self.actual_val
    }

    pub fn matches(&self) -> bool {
        self.total_matches() && self.splits_match()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    pub classes: Vec<ClassCountCheck>,
    pub expected_table_total: usize,
    pub stated_total: Option<usize>,
    pub actual_total: usize,
}

impl VerificationReport {
    pub fn all_match(&self) -> bool {
        self.classes.iter().all(ClassCountCheck::matches)
    }

    pub fn mismatches(&self) -> Vec<&ClassCountCheck> {
        self.classes.iter().filter(|c| !c.matches()).collect()
    }

    /// The quoted total disagrees with the per-class table. Informational only.
    pub fn total_discrepancy(&self) -> Option<(usize, usize)> {
        self.stated_total
            .filter(|&stated| stated != self.expected_table_total)
            .map(|stated| (self.expected_table_total, stated))
    }
}

/// Compare a manifest with expected counts. Never fails: mismatches are data.
pub fn verify_counts(manifest: &DatasetManifest, expected: &ExpectedCounts) -> VerificationReport {
    let classes = ClassLabel::ALL
        .iter()
        .zip(expected.per_class.iter())
        .map(|(&class, &(total, train, val))| ClassCountCheck {
            class,
            expected_total: total,
            actual_total: manifest.class_total(class),
            expected_train: train,
            actual_train: manifest.class_split_count(class, Split::Train),
            expected_val: val,
            actual_val: manifest.class_split_count(class, Split::Val),
        })
        .collect();
    VerificationReport {
        classes,
        expected_table_total: expected.table_total(),
        stated_total: expected.stated_total,
        actual_total: manifest.records.len(),
    }
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<12} {:>15} {:>15} {:>15}  status",
            "class", "total exp/act", "train exp/act", "val exp/act"
        )?;
        for c in &self.classes {
            writeln!(
                f,
                "{:<12} {:>15} {:>15} {:>15}  {}",
                c.class.as_str(),
                format!("{}/{}", c.expected_total, c.actual_total),
                format!("{}/{}", c.expected_train, c.actual_train),
                format!("{}/{}", c.expected_val, c.actual_val),
                if c.matches() { "match" } else { "MISMATCH" }
            )?;
        }
        writeln!(
            f,
            "sum of class totals: expected {}, actual {}",
            self.expected_table_total, self.actual_total
        )?;
        if let Some((table, stated)) = self.total_discrepancy() {
            writeln!(
                f,
                "note: class totals sum to {table} but the dataset is described as {stated} images (not treated as a failure)"
            )?;
        }
        write!(
            f,
            "{}",
            if self.all_match() {
                "all classes match".to_string()
            } else {
                format!("{} class(es) mismatched", self.mismatches().len())
            }
        )
    }
}
