//! Per-point class assignments with provenance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ClassId = u16;

/// Where a label came from. Ordered by overwrite authority, lowest first,
/// except that `Corrected` outranks `Seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Seed,
    Grown,
    Predicted,
    Corrected,
}

impl Provenance {
    /// Authority rank: Predicted < Grown < Seed < Corrected.
    pub fn authority(self) -> u8 {
        match self {
            Provenance::Predicted => 0,
            Provenance::Grown => 1,
            Provenance::Seed => 2,
            Provenance::Corrected => 3,
        }
    }

    /// Whether labels of this provenance may be used as training targets.
    pub fn supervises(self) -> bool {
        !matches!(self, Provenance::Predicted)
    }

    pub fn to_byte(self) -> u8 {
        match self {
            Provenance::Seed => 1,
            Provenance::Grown => 2,
            Provenance::Predicted => 3,
            Provenance::Corrected => 4,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            1 => Provenance::Seed,
            2 => Provenance::Grown,
            3 => Provenance::Predicted,
            4 => Provenance::Corrected,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Label {
    pub class: ClassId,
    pub provenance: Provenance,
}

/// Label assignment for every point of one cloud; `None` means unlabeled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    num_classes: usize,
    entries: Vec<Option<Label>>,
}

impl LabelMap {
    pub fn unlabeled(len: usize, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {num_classes}")));
        }
        if num_classes > ClassId::MAX as usize {
            return Err(Error::invalid(format!("too many classes: {num_classes}")));
        }
        Ok(Self {
            num_classes,
            entries: vec![None; len],
        })
    }

    /// A full map in which every point carries `provenance`.
    pub fn from_classes(classes: &[ClassId], num_classes: usize, provenance: Provenance) -> Result<Self> {
        let mut map = Self::unlabeled(classes.len(), num_classes)?;
        for (i, &c) in classes.iter().enumerate() {
            map.set(i, c, provenance)?;
        }
        Ok(map)
    }

    /// Builds a map from optional classes (as read from a label file).
    pub fn from_optional(classes: &[Option<ClassId>], num_classes: usize, provenance: Provenance) -> Result<Self> {
        let mut map = Self::unlabeled(classes.len(), num_classes)?;
        for (i, c) in classes.iter().enumerate() {
            if let Some(c) = *c {
                map.set(i, c, provenance)?;
            }
        }
        Ok(map)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<Label> {
        self.entries.get(i).copied().flatten()
    }

    pub fn class(&self, i: usize) -> Option<ClassId> {
        self.get(i).map(|l| l.class)
    }

    pub fn entries(&self) -> &[Option<Label>] {
        &self.entries
    }

    pub fn classes(&self) -> Vec<Option<ClassId>> {
        self.entries.iter().map(|e| e.map(|l| l.class)).collect()
    }

    /// Unconditionally writes a label (range-checked only).
    pub fn set(&mut self, i: usize, class: ClassId, provenance: Provenance) -> Result<()> {
        if i >= self.entries.len() {
            return Err(Error::invalid(format!("point id {i} out of range")));
        }
        if class as usize >= self.num_classes {
            return Err(Error::invalid(format!(
                "class {class} out of range for {} classes",
                self.num_classes
            )));
        }
        self.entries[i] = Some(Label { class, provenance });
        Ok(())
    }

    pub fn clear(&mut self, i: usize) {
        if let Some(e) = self.entries.get_mut(i) {
            *e = None;
        }
    }

    pub fn is_full(&self) -> bool {
        self.entries.iter().all(Option::is_some)
    }

    pub fn labeled_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_some()).count()
    }

    /// Ids of labels eligible as training targets (anything but `Predicted`).
    pub fn supervised_ids(&self) -> Vec<usize> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.is_some_and(|l| l.provenance.supervises()))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count_with(&self, provenance: Provenance) -> usize {
        self.entries
            .iter()
            .filter(|e| e.is_some_and(|l| l.provenance == provenance))
            .count()
    }

    /// Dense class vector; errors if any point is unlabeled.
    pub fn dense_classes(&self) -> Result<Vec<ClassId>> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| e.map(|l| l.class).ok_or_else(|| Error::invalid(format!("point {i} is unlabeled"))))
            .collect()
    }

    /// Number of points per class (unlabeled points ignored).
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for l in self.entries.iter().flatten() {
            h[l.class as usize] += 1;
        }
        h
    }

    /// Renders the plain-text label sidecar: `classes=<C>` then one class per line, `-1` for unlabeled.
    pub fn to_label_file(&self) -> String {
        let mut out = format!("classes={}\n", self.num_classes);
        for e in &self.entries {
            match e {
                Some(l) => out.push_str(&l.class.to_string()),
                None => out.push_str("-1"),
            }
            out.push('\n');
        }
        out
    }

    /// Parses a label sidecar; labeled entries receive `provenance`.
    pub fn from_label_file(text: &str, provenance: Provenance) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let (n, head) = lines.next().ok_or_else(|| Error::parse(1, "empty label file"))?;
        let c: usize = head
            .strip_prefix("classes=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::parse(n, "expected `classes=<C>`"))?;
        if !(2..=ClassId::MAX as usize).contains(&c) {
            return Err(Error::parse(n, format!("class count {c} out of range")));
        }
        let mut classes = Vec::new();
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            let v: i64 = line
                .parse()
                .map_err(|_| Error::parse(n, format!("`{line}` is not an integer")))?;
            match v {
                -1 => classes.push(None),
                v if v >= 0 && (v as usize) < c => classes.push(Some(v as ClassId)),
                v => return Err(Error::parse(n, format!("label {v} out of range for {c} classes"))),
            }
        }
        Self::from_optional(&classes, c, provenance)
    }
}
