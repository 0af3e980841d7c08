//! Compositional triplet label space.
//!
//! A triplet class is an `(instrument, verb, target)` tuple. The set of valid
//! tuples is a subset of the full cartesian product and defines class ids
//! `0..C` in file order.
//!
//! Vocabulary file layout (line oriented, `#` starts a comment):
//!
//! ```text
//! [instruments]
//! 0:grasper
//! 1:bipolar
//! [verbs]
//! 0:grasp
//! [targets]
//! 0:gallbladder
//! [triplets]
//! 0:grasper,grasp,gallbladder
//! ```
//!
//! Ids inside each section must be `0..n` in order; triplet records refer to
//! components by name.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::DatasetManifest;
use crate::error::{Error, Result};

/// Default instrument names used by synthetic vocabularies.
pub const INSTRUMENT_NAMES: [&str; 6] = [
    "grasper",
    "bipolar",
    "hook",
    "scissors",
    "clipper",
    "irrigator",
];

pub const VERB_NAMES: [&str; 10] = [
    "grasp",
    "retract",
    "dissect",
    "coagulate",
    "clip",
    "cut",
    "aspirate",
    "irrigate",
    "pack",
    "null_verb",
];

pub const TARGET_NAMES: [&str; 15] = [
    "gallbladder",
    "cystic_plate",
    "cystic_duct",
    "cystic_artery",
    "cystic_pedicle",
    "blood_vessel",
    "fluid",
    "abdominal_wall_cavity",
    "liver",
    "adhesion",
    "omentum",
    "peritoneum",
    "gut",
    "specimen_bag",
    "null_target",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Instrument,
    Verb,
    Target,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Instrument, Component::Verb, Component::Target];

    pub fn name(self) -> &'static str {
        match self {
            Component::Instrument => "instrument",
            Component::Verb => "verb",
            Component::Target => "target",
        }
    }
}

/// One valid `(instrument, verb, target)` index tuple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triplet {
    pub instrument: usize,
    pub verb: usize,
    pub target: usize,
}

impl Triplet {
    pub fn new(instrument: usize, verb: usize, target: usize) -> Self {
        Triplet {
            instrument,
            verb,
            target,
        }
    }

    pub fn get(&self, component: Component) -> usize {
        match component {
            Component::Instrument => self.instrument,
            Component::Verb => self.verb,
            Component::Target => self.target,
        }
    }

    /// Number of positions on which the two tuples agree.
    pub fn matches(&self, other: &Triplet) -> u8 {
        u8::from(self.instrument == other.instrument)
            + u8::from(self.verb == other.verb)
            + u8::from(self.target == other.target)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentVocabulary {
    instruments: Vec<String>,
    verbs: Vec<String>,
    targets: Vec<String>,
}

impl ComponentVocabulary {
    pub fn new(instruments: Vec<String>, verbs: Vec<String>, targets: Vec<String>) -> Result<Self> {
        for (what, names) in [
            ("instruments", &instruments),
            ("verbs", &verbs),
            ("targets", &targets),
        ] {
            if names.is_empty() {
                return Err(Error::validation(what, "component list is empty"));
            }
            let mut seen = HashSet::new();
            for name in names {
                if name.trim().is_empty() {
                    return Err(Error::validation(what, "empty component name"));
                }
                if !seen.insert(name.as_str()) {
                    return Err(Error::validation(what, format!("duplicate name `{name}`")));
                }
            }
        }
        Ok(ComponentVocabulary {
            instruments,
            verbs,
            targets,
        })
    }

    /// Names taken from the default lists, falling back to `<kind>_<k>` past
    /// their end.
    pub fn with_dims(instruments: usize, verbs: usize, targets: usize) -> Result<Self> {
        fn names(defaults: &[&str], prefix: &str, n: usize) -> Vec<String> {
            (0..n)
                .map(|k| {
                    defaults
                        .get(k)
                        .map(|s| s.to_string())
                        .unwrap_or_else(|| format!("{prefix}_{k}"))
                })
                .collect()
        }
        Self::new(
            names(&INSTRUMENT_NAMES, "instrument", instruments),
            names(&VERB_NAMES, "verb", verbs),
            names(&TARGET_NAMES, "target", targets),
        )
    }

    pub fn names(&self, component: Component) -> &[String] {
        match component {
            Component::Instrument => &self.instruments,
            Component::Verb => &self.verbs,
            Component::Target => &self.targets,
        }
    }

    pub fn len(&self, component: Component) -> usize {
        self.names(component).len()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.instruments.len(), self.verbs.len(), self.targets.len())
    }

    fn index_of(&self, component: Component, name: &str) -> Option<usize> {
        self.names(component).iter().position(|n| n == name)
    }
}

/// Component-level multi-hot labels derived from a triplet multi-hot vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentLabels {
    pub instrument: Vec<u8>,
    pub verb: Vec<u8>,
    pub target: Vec<u8>,
}

impl ComponentLabels {
    pub fn get(&self, component: Component) -> &[u8] {
        match component {
            Component::Instrument => &self.instrument,
            Component::Verb => &self.verb,
            Component::Target => &self.target,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TripletVocabulary {
    components: ComponentVocabulary,
    triplets: Vec<Triplet>,
    lookup: HashMap<Triplet, usize>,
}

impl PartialEq for TripletVocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.components == other.components && self.triplets == other.triplets
    }
}

impl TripletVocabulary {
    pub fn new(components: ComponentVocabulary, triplets: Vec<Triplet>) -> Result<Self> {
        let (ni, nv, nt) = components.dims();
        if triplets.is_empty() {
            return Err(Error::validation("triplets", "no valid triplets"));
        }
        let mut lookup = HashMap::with_capacity(triplets.len());
        for (id, t) in triplets.iter().enumerate() {
            if t.instrument >= ni || t.verb >= nv || t.target >= nt {
                return Err(Error::validation(
                    "triplets",
                    format!("triplet {id} {t:?} has a component index out of range"),
                ));
            }
            if lookup.insert(*t, id).is_some() {
                return Err(Error::validation(
                    "triplets",
                    format!("duplicate triplet {t:?} at class {id}"),
                ));
            }
        }
        Ok(TripletVocabulary {
            components,
            triplets,
            lookup,
        })
    }

    /// Every tuple of the cartesian product, ordered instrument-major.
    pub fn full(components: ComponentVocabulary) -> Result<Self> {
        let (ni, nv, nt) = components.dims();
        let mut triplets = Vec::with_capacity(ni * nv * nt);
        for i in 0..ni {
            for v in 0..nv {
                for t in 0..nt {
                    triplets.push(Triplet::new(i, v, t));
                }
            }
        }
        Self::new(components, triplets)
    }

    pub fn components(&self) -> &ComponentVocabulary {
        &self.components
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn num_classes(&self) -> usize {
        self.triplets.len()
    }

    pub fn decompose(&self, class_id: usize) -> Result<Triplet> {
        self.triplets.get(class_id).copied().ok_or(Error::Index {
            what: "triplet class",
            index: class_id,
            len: self.triplets.len(),
        })
    }

    /// Class id of `(i, v, t)`, or `None` when the tuple is not a valid class.
    pub fn compose(&self, instrument: usize, verb: usize, target: usize) -> Result<Option<usize>> {
        for (component, index) in [
            (Component::Instrument, instrument),
            (Component::Verb, verb),
            (Component::Target, target),
        ] {
            let len = self.components.len(component);
            if index >= len {
                return Err(Error::Index {
                    what: component.name(),
                    index,
                    len,
                });
            }
        }
        Ok(self
            .lookup
            .get(&Triplet::new(instrument, verb, target))
            .copied())
    }

    pub fn class_of(&self, triplet: Triplet) -> Option<usize> {
        self.lookup.get(&triplet).copied()
    }

    /// Class id for a triplet given by component names.
    pub fn class_by_names(&self, instrument: &str, verb: &str, target: &str) -> Option<usize> {
        let c = &self.components;
        let t = Triplet::new(
            c.index_of(Component::Instrument, instrument)?,
            c.index_of(Component::Verb, verb)?,
            c.index_of(Component::Target, target)?,
        );
        self.class_of(t)
    }

    /// Human readable `instrument,verb,target` for a class.
    pub fn class_name(&self, class_id: usize) -> Result<String> {
        let t = self.decompose(class_id)?;
        let c = &self.components;
        Ok(format!(
            "{},{},{}",
            c.instruments[t.instrument], c.verbs[t.verb], c.targets[t.target]
        ))
    }

    /// Elementwise OR of the components of every active triplet.
    pub fn component_multihot(&self, triplet_multihot: &[u8]) -> Result<ComponentLabels> {
        if triplet_multihot.len() != self.num_classes() {
            return Err(Error::Shape {
                what: "triplet multi-hot vector",
                expected: self.num_classes(),
                actual: triplet_multihot.len(),
            });
        }
        let (ni, nv, nt) = self.components.dims();
        let mut out = ComponentLabels {
            instrument: vec![0; ni],
            verb: vec![0; nv],
            target: vec![0; nt],
        };
        for (id, &x) in triplet_multihot.iter().enumerate() {
            match x {
                0 => {}
                1 => {
                    let t = self.triplets[id];
                    out.instrument[t.instrument] = 1;
                    out.verb[t.verb] = 1;
                    out.target[t.target] = 1;
                }
                other => {
                    return Err(Error::Range {
                        what: "multi-hot entry",
                        value: other.to_string(),
                        range: "{0, 1}".into(),
                    })
                }
            }
        }
        Ok(out)
    }

    /// Same as [`component_multihot`](Self::component_multihot) for a sparse
    /// list of active class ids.
    pub fn component_labels(&self, active: &[usize]) -> Result<ComponentLabels> {
        let mut dense = vec![0u8; self.num_classes()];
        for &id in active {
            self.decompose(id)?;
            dense[id] = 1;
        }
        self.component_multihot(&dense)
    }

    pub fn component_match_count(&self, a: usize, b: usize) -> Result<u8> {
        Ok(self.decompose(a)?.matches(&self.decompose(b)?))
    }

    /// Valid classes differing from `class_id` in exactly one component.
    pub fn one_component_neighbors(&self, class_id: usize) -> Result<Vec<usize>> {
        let base = self.decompose(class_id)?;
        Ok(self
            .triplets
            .iter()
            .enumerate()
            .filter(|(_, t)| t.matches(&base) == 2)
            .map(|(id, _)| id)
            .collect())
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        #[derive(PartialEq)]
        enum Section {
            None,
            Names(usize),
            Triplets,
        }
        let mut lists: [Vec<String>; 3] = Default::default();
        let mut records: Vec<(usize, [String; 3])> = Vec::new();
        let mut section = Section::None;

        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line {
                "[instruments]" => section = Section::Names(0),
                "[verbs]" => section = Section::Names(1),
                "[targets]" => section = Section::Names(2),
                "[triplets]" => section = Section::Triplets,
                _ => {
                    let (id, body) = line.split_once(':').ok_or_else(|| {
                        Error::parse(source, line_no, "expected `<id>:<value>`")
                    })?;
                    let id: usize = id
                        .trim()
                        .parse()
                        .map_err(|_| Error::parse(source, line_no, format!("bad id `{id}`")))?;
                    match section {
                        Section::None => {
                            return Err(Error::parse(source, line_no, "record outside of a section"))
                        }
                        Section::Names(k) => {
                            let list = &mut lists[k];
                            if id != list.len() {
                                return Err(Error::parse(
                                    source,
                                    line_no,
                                    format!("expected id {}, found {id}", list.len()),
                                ));
                            }
                            let name = body.trim();
                            if name.is_empty() {
                                return Err(Error::parse(source, line_no, "empty name"));
                            }
                            if list.iter().any(|n| n == name) {
                                return Err(Error::parse(
                                    source,
                                    line_no,
                                    format!("duplicate name `{name}`"),
                                ));
                            }
                            list.push(name.to_string());
                        }
                        Section::Triplets => {
                            if id != records.len() {
                                return Err(Error::parse(
                                    source,
                                    line_no,
                                    format!("expected class id {}, found {id}", records.len()),
                                ));
                            }
                            let parts: Vec<&str> = body.split(',').map(str::trim).collect();
                            let [i, v, t] = parts.as_slice() else {
                                return Err(Error::parse(
                                    source,
                                    line_no,
                                    "triplet must be `instrument,verb,target`",
                                ));
                            };
                            records.push((line_no, [i.to_string(), v.to_string(), t.to_string()]));
                        }
                    }
                }
            }
        }

        let [instruments, verbs, targets] = lists;
        let components = ComponentVocabulary::new(instruments, verbs, targets)
            .map_err(|e| Error::parse(source, 0, e.to_string()))?;
        let mut triplets = Vec::with_capacity(records.len());
        let mut seen = HashSet::new();
        for (line_no, [i, v, t]) in records {
            let lookup = |component: Component, name: &str| {
                components.index_of(component, name).ok_or_else(|| {
                    Error::parse(
                        source,
                        line_no,
                        format!("unknown {} `{name}`", component.name()),
                    )
                })
            };
            let triplet = Triplet::new(
                lookup(Component::Instrument, &i)?,
                lookup(Component::Verb, &v)?,
                lookup(Component::Target, &t)?,
            );
            if !seen.insert(triplet) {
                return Err(Error::parse(
                    source,
                    line_no,
                    format!("duplicate triplet `{i},{v},{t}`"),
                ));
            }
            triplets.push(triplet);
        }
        if triplets.is_empty() {
            return Err(Error::parse(source, 0, "no [triplets] records"));
        }
        Self::new(components, triplets)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for component in Component::ALL {
            let _ = writeln!(out, "[{}s]", component.name());
            for (k, name) in self.components.names(component).iter().enumerate() {
                let _ = writeln!(out, "{k}:{name}");
            }
        }
        out.push_str("[triplets]\n");
        for id in 0..self.num_classes() {
            let _ = writeln!(out, "{id}:{}", self.class_name(id).expect("valid id"));
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Per-class positive-frame fraction in a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrevalenceTable {
    pub fractions: Vec<f64>,
    pub num_frames: usize,
}

impl PrevalenceTable {
    /// Builds the table from per-frame active class lists.
    pub fn from_labels<'a>(
        num_classes: usize,
        frames: impl IntoIterator<Item = &'a [usize]>,
    ) -> Result<Self> {
        let mut counts = vec![0usize; num_classes];
        let mut num_frames = 0;
        for active in frames {
            num_frames += 1;
            for &id in active {
                *counts.get_mut(id).ok_or(Error::Index {
                    what: "triplet class",
                    index: id,
                    len: num_classes,
                })? += 1;
            }
        }
        if num_frames == 0 {
            return Err(Error::EmptyInput("prevalence needs at least one frame"));
        }
        Ok(PrevalenceTable {
            fractions: counts
                .iter()
                .map(|&c| c as f64 / num_frames as f64)
                .collect(),
            num_frames,
        })
    }

    /// Ratio between the largest and smallest non-zero prevalence.
    pub fn imbalance_ratio(&self) -> f64 {
        let positive = self.fractions.iter().copied().filter(|&p| p > 0.0);
        let max = positive.clone().fold(0.0_f64, f64::max);
        let min = positive.fold(f64::INFINITY, f64::min);
        if min.is_finite() {
            max / min
        } else {
            0.0
        }
    }
}

/// Prevalence of the annotated labels of a manifest.
pub fn prevalence(manifest: &DatasetManifest) -> Result<PrevalenceTable> {
    PrevalenceTable::from_labels(
        manifest.vocab().num_classes(),
        manifest.frames().iter().map(|f| f.triplets.as_slice()),
    )
}
