//! A deterministic synthetic world that implements every backend from ground
//! truth, so the whole pipeline can be checked end to end without a model.
//!
//! A [`SceneGraph`] holds flat-shaded objects on a solid canvas and typed
//! dependency edges pointing from an object to the elements that depend on
//! it. Removing an object implies removing its [`closure`] under those edges.
//! Objects never overlap, so rendering is injective on removed-sets and an
//! object is "visible" in an image exactly when its own color shows inside
//! its own footprint.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    BackendError, BackendSet, Endpoint, Locality, Remover, SegmentInstance, SegmentResult,
    Segmenter, TextReasoner, VisionReasoner,
};
use crate::parse::{
    format_analyzer_response, format_examiner_response, format_label_list, label_key,
    parse_list_after, parse_target_line, CorrectionList, RemovalPlan, ELEMENTS_MARKER, KEEP_MARKER,
};
use crate::pipeline::{CONSOLIDATE_ELEMENTS, CONSOLIDATE_TARGETS};
use crate::prompts::{ChainStep, PromptBundle, PromptKind, REMOVAL_REQUEST_PREFIX};
use crate::raster::{Image, Mask};

pub type ObjectId = u32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum OracleError {
    #[error("unknown object id {0}")]
    UnknownObject(ObjectId),
    #[error("duplicate object id {0}")]
    DuplicateId(ObjectId),
    #[error("duplicate object name {0:?}")]
    DuplicateName(String),
    #[error("edge {from}->{to} references a missing object")]
    UnknownEdgeEndpoint { from: ObjectId, to: ObjectId },
    #[error("dependency edges contain a cycle")]
    Cycle,
    #[error("object {0} lies outside the canvas or is empty")]
    OutOfCanvas(ObjectId),
    #[error("objects {0} and {1} overlap")]
    Overlap(ObjectId, ObjectId),
    #[error("object {0} has the background color")]
    BackgroundColor(ObjectId),
    #[error("invalid scene parameters: {0}")]
    InvalidParams(String),
    #[error("scene json: {0}")]
    Json(String),
    #[error("scene io: {0}")]
    Io(String),
}

/// The four ways an element can depend on a removed object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionKind {
    LightingDependent,
    PhysicallyConnected,
    TargetProduced,
    ContextuallyLinked,
}

impl InteractionKind {
    pub const ALL: [InteractionKind; 4] = [
        InteractionKind::LightingDependent,
        InteractionKind::PhysicallyConnected,
        InteractionKind::TargetProduced,
        InteractionKind::ContextuallyLinked,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InteractionKind::LightingDependent => "lighting_dependent",
            InteractionKind::PhysicallyConnected => "physically_connected",
            InteractionKind::TargetProduced => "target_produced",
            InteractionKind::ContextuallyLinked => "contextually_linked",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Rect,
    Ellipse,
    Diamond,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: ObjectId,
    pub name: String,
    pub shape: Shape,
    pub color: [u8; 3],
    /// Top-left corner of the bounding box, `[x, y]`.
    pub position: [usize; 2],
    /// Bounding box `[width, height]`.
    pub size: [usize; 2],
}

impl SceneObject {
    fn covers(&self, x: usize, y: usize) -> bool {
        let [x0, y0] = self.position;
        let [w, h] = self.size;
        if x < x0 || y < y0 || x >= x0 + w || y >= y0 + h {
            return false;
        }
        let rx = w as f64 / 2.0;
        let ry = h as f64 / 2.0;
        let dx = (x - x0) as f64 + 0.5 - rx;
        let dy = (y - y0) as f64 + 0.5 - ry;
        match self.shape {
            Shape::Rect => true,
            Shape::Ellipse => (dx / rx).powi(2) + (dy / ry).powi(2) <= 1.0,
            Shape::Diamond => dx.abs() / rx + dy.abs() / ry <= 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub from: ObjectId,
    pub to: ObjectId,
    pub kind: InteractionKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Canvas {
    pub width: usize,
    pub height: usize,
    pub background: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub canvas: Canvas,
    pub objects: Vec<SceneObject>,
    pub edges: Vec<Edge>,
}

/// Ids of every object that must go when a target set is removed.
pub type RemovalClosure = BTreeSet<ObjectId>;

const BACKGROUND: [u8; 3] = [236, 231, 220];
const SHADOW: [u8; 3] = [92, 92, 96];
const CELL: usize = 64;
const CELL_MARGIN: usize = 12;
const MIN_SIDE: usize = 16;
const MAX_SIDE: usize = CELL - 2 * CELL_MARGIN;

const PALETTE: [(&str, [u8; 3]); 16] = [
    ("red", [200, 30, 40]),
    ("green", [40, 150, 60]),
    ("blue", [40, 70, 200]),
    ("yellow", [230, 200, 30]),
    ("orange", [240, 130, 20]),
    ("purple", [120, 50, 160]),
    ("cyan", [30, 190, 200]),
    ("magenta", [210, 40, 170]),
    ("brown", [120, 70, 30]),
    ("pink", [250, 150, 180]),
    ("navy", [20, 30, 90]),
    ("teal", [20, 110, 110]),
    ("olive", [110, 120, 30]),
    ("maroon", [110, 20, 30]),
    ("lime", [150, 220, 40]),
    ("black", [20, 20, 20]),
];

const SHAPES: [(&str, Shape); 3] = [
    ("box", Shape::Rect),
    ("ball", Shape::Ellipse),
    ("kite", Shape::Diamond),
];

const DEPENDENT_VARIANTS: [&str; 4] =
    ["shadow", "reflection", "second shadow", "second reflection"];

impl SceneGraph {
    pub fn object(&self, id: ObjectId) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn ids(&self) -> BTreeSet<ObjectId> {
        self.objects.iter().map(|o| o.id).collect()
    }

    /// Looks an object up by name, ignoring case, spacing, a leading article
    /// and trailing punctuation.
    pub fn find_by_name(&self, label: &str) -> Option<&SceneObject> {
        let key = label_key(label.trim().trim_end_matches(['.', ',', ';', '!']));
        self.objects.iter().find(|o| label_key(&o.name) == key)
    }

    /// Linear pixel indices covered by an object.
    pub fn footprint(&self, obj: &SceneObject) -> Vec<usize> {
        let w = self.canvas.width;
        let [x0, y0] = obj.position;
        let [ow, oh] = obj.size;
        let mut px = Vec::with_capacity(ow * oh);
        for y in y0..(y0 + oh).min(self.canvas.height) {
            for x in x0..(x0 + ow).min(w) {
                if obj.covers(x, y) {
                    px.push(y * w + x);
                }
            }
        }
        px
    }

    pub fn footprint_mask(&self, obj: &SceneObject) -> Mask {
        let mut data = vec![0u8; self.canvas.width * self.canvas.height];
        for p in self.footprint(obj) {
            data[p] = 1;
        }
        Mask::new(self.canvas.width, self.canvas.height, data).expect("canvas dims validated")
    }

    /// The same scene with the given objects and their incident edges dropped.
    pub fn without(&self, ids: &BTreeSet<ObjectId>) -> SceneGraph {
        SceneGraph {
            canvas: self.canvas,
            objects: self
                .objects
                .iter()
                .filter(|o| !ids.contains(&o.id))
                .cloned()
                .collect(),
            edges: self
                .edges
                .iter()
                .filter(|e| !ids.contains(&e.from) && !ids.contains(&e.to))
                .copied()
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        if self.canvas.width == 0 || self.canvas.height == 0 {
            return Err(OracleError::InvalidParams("empty canvas".into()));
        }
        let mut ids = BTreeSet::new();
        let mut names = BTreeSet::new();
        for o in &self.objects {
            if !ids.insert(o.id) {
                return Err(OracleError::DuplicateId(o.id));
            }
            if !names.insert(label_key(&o.name)) {
                return Err(OracleError::DuplicateName(o.name.clone()));
            }
            let [x, y] = o.position;
            let [w, h] = o.size;
            if w == 0 || h == 0 || x + w > self.canvas.width || y + h > self.canvas.height {
                return Err(OracleError::OutOfCanvas(o.id));
            }
            if self.footprint(o).is_empty() {
                return Err(OracleError::OutOfCanvas(o.id));
            }
            if o.color == self.canvas.background {
                return Err(OracleError::BackgroundColor(o.id));
            }
        }
        for (i, a) in self.objects.iter().enumerate() {
            for b in &self.objects[i + 1..] {
                let sep_x = a.position[0] + a.size[0] <= b.position[0]
                    || b.position[0] + b.size[0] <= a.position[0];
                let sep_y = a.position[1] + a.size[1] <= b.position[1]
                    || b.position[1] + b.size[1] <= a.position[1];
                if !sep_x && !sep_y {
                    return Err(OracleError::Overlap(a.id, b.id));
                }
            }
        }
        for e in &self.edges {
            if !ids.contains(&e.from) || !ids.contains(&e.to) {
                return Err(OracleError::UnknownEdgeEndpoint {
                    from: e.from,
                    to: e.to,
                });
            }
        }
        topological_order(self).map(|_| ())
    }

    pub fn from_json(text: &str) -> Result<Self, OracleError> {
        let scene: SceneGraph =
            serde_json::from_str(text).map_err(|e| OracleError::Json(e.to_string()))?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, OracleError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| OracleError::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenes serialize")
    }
}

fn children(scene: &SceneGraph) -> BTreeMap<ObjectId, Vec<ObjectId>> {
    let mut adj: BTreeMap<ObjectId, Vec<ObjectId>> = BTreeMap::new();
    for e in &scene.edges {
        adj.entry(e.from).or_default().push(e.to);
    }
    for v in adj.values_mut() {
        v.sort_unstable();
        v.dedup();
    }
    adj
}

fn topological_order(scene: &SceneGraph) -> Result<Vec<ObjectId>, OracleError> {
    let mut indeg: BTreeMap<ObjectId, usize> = scene.objects.iter().map(|o| (o.id, 0)).collect();
    let adj = children(scene);
    for kids in adj.values() {
        for k in kids {
            *indeg.get_mut(k).ok_or(OracleError::UnknownObject(*k))? += 1;
        }
    }
    let mut ready: VecDeque<ObjectId> = indeg
        .iter()
        .filter(|(_, &d)| d == 0)
        .map(|(&i, _)| i)
        .collect();
    let mut order = Vec::with_capacity(indeg.len());
    while let Some(n) = ready.pop_front() {
        order.push(n);
        for k in adj.get(&n).into_iter().flatten() {
            let d = indeg.get_mut(k).expect("edge endpoints checked");
            *d -= 1;
            if *d == 0 {
                ready.push_back(*k);
            }
        }
    }
    if order.len() != indeg.len() {
        return Err(OracleError::Cycle);
    }
    Ok(order)
}

/// Smallest superset of `targets` closed under outgoing dependency edges.
pub fn closure(
    scene: &SceneGraph,
    targets: &BTreeSet<ObjectId>,
) -> Result<RemovalClosure, OracleError> {
    Ok(closure_order(scene, targets)?.into_iter().collect())
}

/// Breadth-first closure, targets first, in discovery order.
pub fn closure_order(
    scene: &SceneGraph,
    targets: &BTreeSet<ObjectId>,
) -> Result<Vec<ObjectId>, OracleError> {
    let ids = scene.ids();
    if let Some(bad) = targets.iter().find(|t| !ids.contains(t)) {
        return Err(OracleError::UnknownObject(*bad));
    }
    let adj = children(scene);
    let mut seen: BTreeSet<ObjectId> = targets.clone();
    let mut order: Vec<ObjectId> = targets.iter().copied().collect();
    let mut queue: VecDeque<ObjectId> = targets.iter().copied().collect();
    while let Some(n) = queue.pop_front() {
        for &k in adj.get(&n).into_iter().flatten() {
            if seen.insert(k) {
                order.push(k);
                queue.push_back(k);
            }
        }
    }
    Ok(order)
}

/// Flat render of every object not in `removed`.
pub fn render(scene: &SceneGraph, removed: &BTreeSet<ObjectId>) -> Image {
    let Canvas {
        width,
        height,
        background,
    } = scene.canvas;
    let mut data: Vec<u8> = background
        .iter()
        .copied()
        .cycle()
        .take(width * height * 3)
        .collect();
    for o in scene.objects.iter().filter(|o| !removed.contains(&o.id)) {
        for p in scene.footprint(o) {
            data[p * 3..p * 3 + 3].copy_from_slice(&o.color);
        }
    }
    Image::new(width, height, data).expect("canvas dims validated")
}

/// Random scene: `n_objects` shapes in distinct grid cells and a random DAG
/// where each ordered pair gets an edge with probability `edge_density`.
pub fn gen_scene(
    seed: u64,
    n_objects: usize,
    edge_density: f64,
) -> Result<SceneGraph, OracleError> {
    if n_objects == 0 {
        return Err(OracleError::InvalidParams(
            "n_objects must be at least 1".into(),
        ));
    }
    if !(0.0..=1.0).contains(&edge_density) {
        return Err(OracleError::InvalidParams(format!(
            "edge_density {edge_density} outside [0, 1]"
        )));
    }
    let max_distinct = PALETTE.len() * SHAPES.len();
    if n_objects > max_distinct {
        return Err(OracleError::InvalidParams(format!(
            "at most {max_distinct} objects supported"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cols = (n_objects as f64).sqrt().ceil() as usize;
    let rows = n_objects.div_ceil(cols);
    let canvas = Canvas {
        width: cols * CELL,
        height: rows * CELL,
        background: BACKGROUND,
    };

    let mut order: Vec<ObjectId> = (0..n_objects as ObjectId).collect();
    order.shuffle(&mut rng);
    let mut edges = Vec::new();
    for i in 0..n_objects {
        for j in i + 1..n_objects {
            if rng.gen_bool(edge_density) {
                let kind = InteractionKind::ALL[rng.gen_range(0..4)];
                edges.push(Edge {
                    from: order[i],
                    to: order[j],
                    kind,
                });
            }
        }
    }

    let mut cells: Vec<usize> = (0..cols * rows).collect();
    cells.shuffle(&mut rng);
    let mut looks: Vec<(usize, usize)> = (0..PALETTE.len())
        .flat_map(|c| (0..SHAPES.len()).map(move |s| (c, s)))
        .collect();
    looks.shuffle(&mut rng);
    let mut looks = looks.into_iter();

    let mut objects: BTreeMap<ObjectId, SceneObject> = BTreeMap::new();
    let mut variants_used: BTreeMap<ObjectId, usize> = BTreeMap::new();
    for (slot, &id) in order.iter().enumerate() {
        let cell = cells[slot];
        let w = rng.gen_range(MIN_SIDE..=MAX_SIDE);
        let h = rng.gen_range(MIN_SIDE..=MAX_SIDE);
        let x = (cell % cols) * CELL + CELL_MARGIN + rng.gen_range(0..=MAX_SIDE - w);
        let y = (cell / cols) * CELL + CELL_MARGIN + rng.gen_range(0..=MAX_SIDE - h);
        // First lighting parent in generation order names the dependent.
        let lighting_parent = order[..slot].iter().copied().find(|p| {
            edges
                .iter()
                .any(|e| e.from == *p && e.to == id && e.kind == InteractionKind::LightingDependent)
        });
        let (name, shape, color) = match lighting_parent {
            Some(p) => {
                let used = variants_used.entry(p).or_insert(0);
                let variant = DEPENDENT_VARIANTS
                    .get(*used)
                    .map(|v| v.to_string())
                    .unwrap_or_else(|| format!("shadow {}", *used + 1));
                *used += 1;
                (
                    format!("{}'s {variant}", objects[&p].name),
                    Shape::Ellipse,
                    SHADOW,
                )
            }
            None => {
                let (c, s) = looks.next().expect("enough distinct looks");
                (
                    format!("{} {}", PALETTE[c].0, SHAPES[s].0),
                    SHAPES[s].1,
                    PALETTE[c].1,
                )
            }
        };
        objects.insert(
            id,
            SceneObject {
                id,
                name,
                shape,
                color,
                position: [x, y],
                size: [w, h],
            },
        );
    }
    let scene = SceneGraph {
        canvas,
        objects: objects.into_values().collect(),
        edges,
    };
    debug_assert_eq!(scene.validate(), Ok(()));
    Ok(scene)
}

/// Builder for hand-made scenes.
pub struct SceneBuilder {
    scene: SceneGraph,
}

impl SceneBuilder {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            scene: SceneGraph {
                canvas: Canvas {
                    width,
                    height,
                    background: BACKGROUND,
                },
                objects: Vec::new(),
                edges: Vec::new(),
            },
        }
    }

    pub fn object(
        mut self,
        name: &str,
        shape: Shape,
        color: [u8; 3],
        position: [usize; 2],
        size: [usize; 2],
    ) -> Self {
        let id = self.scene.objects.len() as ObjectId;
        self.scene.objects.push(SceneObject {
            id,
            name: name.to_string(),
            shape,
            color,
            position,
            size,
        });
        self
    }

    pub fn edge(mut self, from: ObjectId, to: ObjectId, kind: InteractionKind) -> Self {
        self.scene.edges.push(Edge { from, to, kind });
        self
    }

    pub fn build(self) -> Result<SceneGraph, OracleError> {
        self.scene.validate()?;
        Ok(self.scene)
    }
}

/// A person casting a shadow, next to an unrelated tree.
pub fn person_with_shadow() -> SceneGraph {
    SceneBuilder::new(192, 96)
        .object("person", Shape::Rect, [200, 60, 50], [16, 16], [20, 40])
        .object(
            "person's shadow",
            Shape::Ellipse,
            SHADOW,
            [48, 60],
            [36, 16],
        )
        .object("tree", Shape::Diamond, [40, 140, 50], [150, 16], [32, 48])
        .edge(0, 1, InteractionKind::LightingDependent)
        .build()
        .expect("demo scene is valid")
}

/// A person holding a watering can that pours a water stream.
pub fn person_with_watering_can() -> SceneGraph {
    SceneBuilder::new(192, 96)
        .object("person", Shape::Rect, [200, 60, 50], [12, 16], [20, 48])
        .object(
            "watering can",
            Shape::Rect,
            [40, 120, 60],
            [48, 30],
            [20, 16],
        )
        .object(
            "water stream",
            Shape::Ellipse,
            [60, 150, 230],
            [84, 40],
            [16, 28],
        )
        .object("bench", Shape::Rect, [120, 80, 40], [130, 50], [44, 20])
        .edge(0, 1, InteractionKind::PhysicallyConnected)
        .edge(1, 2, InteractionKind::TargetProduced)
        .build()
        .expect("demo scene is valid")
}

/// Knobs for the oracle backends.
#[derive(Debug, Clone)]
pub struct OracleOptions {
    /// Confidence reported for every segmentation instance.
    pub instance_score: f64,
    /// Objects the simulator leaves out of its description.
    pub simulator_omits: BTreeSet<ObjectId>,
    /// Object the primary remover leaves untouched. When set, the corrective
    /// pass gets an honest remover of its own.
    pub faulty_object: Option<ObjectId>,
    pub reasoner_locality: Locality,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            instance_score: 0.9,
            simulator_omits: BTreeSet::new(),
            faulty_object: None,
            reasoner_locality: Locality::Local,
        }
    }
}

/// Marker preceding the survivor list in simulator descriptions.
pub const VISIBLE_MARKER: &str = "Visible objects:";

/// Ground-truth implementation of the reasoner, segmenter and remover roles.
pub struct OracleWorld {
    scene: Arc<SceneGraph>,
    footprints: Vec<Vec<usize>>,
    opts: OracleOptions,
}

impl OracleWorld {
    pub fn new(scene: SceneGraph, opts: OracleOptions) -> Self {
        let footprints = scene.objects.iter().map(|o| scene.footprint(o)).collect();
        Self {
            scene: Arc::new(scene),
            footprints,
            opts,
        }
    }

    pub fn scene(&self) -> &SceneGraph {
        &self.scene
    }

    fn check_dims(&self, image: &Image) -> Result<(), BackendError> {
        let c = self.scene.canvas;
        if image.dims() != (c.width, c.height) {
            return Err(BackendError::Precondition(format!(
                "image {:?} is not a render of this {}x{} scene",
                image.dims(),
                c.width,
                c.height
            )));
        }
        Ok(())
    }

    /// Objects whose own color shows anywhere inside their footprint.
    pub fn visible(&self, image: &Image) -> BTreeSet<ObjectId> {
        let data = image.data();
        self.scene
            .objects
            .iter()
            .zip(&self.footprints)
            .filter(|(o, fp)| fp.iter().any(|&p| data[p * 3..p * 3 + 3] == o.color))
            .map(|(o, _)| o.id)
            .collect()
    }

    fn name(&self, id: ObjectId) -> String {
        self.scene
            .object(id)
            .map(|o| o.name.clone())
            .unwrap_or_default()
    }

    fn names(&self, ids: impl IntoIterator<Item = ObjectId>) -> Vec<String> {
        ids.into_iter().map(|i| self.name(i)).collect()
    }

    fn resolve(&self, label: &str) -> Option<ObjectId> {
        self.scene.find_by_name(label).map(|o| o.id)
    }

    fn instruction_target(&self, instruction: &str) -> Option<ObjectId> {
        let t = instruction.trim();
        let t = if t.len() >= 6 && t[..6].eq_ignore_ascii_case("remove") {
            &t[6..]
        } else {
            t
        };
        self.resolve(t)
    }

    fn closure_of(&self, target: ObjectId) -> Vec<ObjectId> {
        closure_order(&self.scene, &BTreeSet::from([target])).unwrap_or_else(|_| vec![target])
    }

    fn analyze(&self, instruction: &str, image: &Image) -> String {
        let visible = self.visible(image);
        let Some(target) = self
            .instruction_target(instruction)
            .filter(|t| visible.contains(t))
        else {
            return format_analyzer_response(&RemovalPlan::new(
                "The requested object is not present in the image.",
                vec![],
            ));
        };
        let ids: Vec<ObjectId> = self
            .closure_of(target)
            .into_iter()
            .filter(|i| visible.contains(i))
            .collect();
        let dependents = self.names(ids[1..].iter().copied());
        let reasoning = if dependents.is_empty() {
            format!(
                "The target object is the {}. Nothing else depends on it.",
                self.name(target)
            )
        } else {
            format!(
                "The target object is the {}. Without it, {} would be inconsistent.",
                self.name(target),
                dependents.join(", ")
            )
        };
        format_analyzer_response(&RemovalPlan::new(reasoning, self.names(ids)))
    }

    fn simulate(&self, request: &str, image: &Image) -> Result<String, BackendError> {
        let labels = parse_list_after(request, REMOVAL_REQUEST_PREFIX)
            .map_err(|e| BackendError::InvalidResponse(e.to_string()))?;
        let removed: BTreeSet<ObjectId> = labels.iter().filter_map(|l| self.resolve(l)).collect();
        let survivors: Vec<ObjectId> = self
            .visible(image)
            .into_iter()
            .filter(|i| !removed.contains(i) && !self.opts.simulator_omits.contains(i))
            .collect();
        Ok(format!(
            "A flat, evenly lit scene on a plain light background. {VISIBLE_MARKER} {}.",
            format_label_list(&self.names(survivors))
        ))
    }

    fn examine(&self, description: &str, image: &Image) -> String {
        let described: BTreeSet<String> = match parse_list_after(description, VISIBLE_MARKER) {
            Ok(list) => list.iter().map(|l| label_key(l)).collect(),
            // free text: an object counts as described when its name appears
            Err(_) => {
                let lower = description.to_lowercase();
                self.scene
                    .objects
                    .iter()
                    .filter(|o| lower.contains(&label_key(&o.name)))
                    .map(|o| label_key(&o.name))
                    .collect()
            }
        };
        let residual: Vec<ObjectId> = self
            .visible(image)
            .into_iter()
            .filter(|&i| !described.contains(&label_key(&self.name(i))))
            .collect();
        let reasoning = if residual.is_empty() {
            "Every visible object is mentioned in the description.".to_string()
        } else {
            "Some visible objects are not mentioned in the description.".to_string()
        };
        format_examiner_response(&CorrectionList {
            reasoning,
            labels: self.names(residual),
        })
    }

    fn chain_text(&self, step: ChainStep, context: &str) -> Result<String, BackendError> {
        let bad = |e: crate::parse::ParseError| BackendError::InvalidResponse(e.to_string());
        match step {
            ChainStep::IdentifyTarget => {
                let name = match self.instruction_target(context) {
                    Some(id) => self.name(id),
                    None => context.trim().trim_end_matches('.').to_string(),
                };
                Ok(format!("Target: {name}"))
            }
            ChainStep::ReasonConsistency => {
                let target = parse_target_line(context).map_err(bad)?;
                let elements = parse_list_after(context, ELEMENTS_MARKER).map_err(bad)?;
                let closure: BTreeSet<ObjectId> = self
                    .resolve(&target)
                    .map(|t| self.closure_of(t).into_iter().collect())
                    .unwrap_or_default();
                let keep: Vec<String> = elements
                    .into_iter()
                    .filter(|e| self.resolve(e).is_some_and(|i| closure.contains(&i)))
                    .collect();
                Ok(format!(
                    "Without the {target}, the kept elements would look implausible.\n{KEEP_MARKER} {}",
                    format_label_list(&keep)
                ))
            }
            ChainStep::ConsolidateList => {
                let targets = parse_list_after(context, CONSOLIDATE_TARGETS).map_err(bad)?;
                let extra = parse_list_after(context, CONSOLIDATE_ELEMENTS).map_err(bad)?;
                let merged: Vec<String> = targets.into_iter().chain(extra).collect();
                Ok(format!("Target Objects: {}", format_label_list(&merged)))
            }
            ChainStep::EnumerateElements => Err(BackendError::Precondition(
                "element enumeration needs the image".into(),
            )),
        }
    }
}

impl Endpoint for OracleWorld {
    fn locality(&self) -> Locality {
        self.opts.reasoner_locality
    }
}

impl VisionReasoner for OracleWorld {
    fn vision_reason(&self, bundle: &PromptBundle, image: &Image) -> Result<String, BackendError> {
        self.check_dims(image)?;
        match PromptKind::of(bundle) {
            Some(PromptKind::Analyzer) => Ok(self.analyze(&bundle.user_text, image)),
            Some(PromptKind::Simulator) => self.simulate(&bundle.user_text, image),
            Some(PromptKind::Examiner) => Ok(self.examine(&bundle.user_text, image)),
            Some(PromptKind::Chain(ChainStep::EnumerateElements)) => {
                let target = parse_target_line(&bundle.user_text)
                    .ok()
                    .and_then(|t| self.resolve(&t));
                let others: Vec<ObjectId> = self
                    .visible(image)
                    .into_iter()
                    .filter(|i| Some(*i) != target)
                    .collect();
                Ok(format!(
                    "{ELEMENTS_MARKER} {}",
                    format_label_list(&self.names(others))
                ))
            }
            Some(PromptKind::Chain(step)) => self.chain_text(step, &bundle.user_text),
            None => Err(BackendError::InvalidResponse(
                "oracle does not recognise this prompt".into(),
            )),
        }
    }
}

impl TextReasoner for OracleWorld {
    fn text_reason(&self, bundle: &PromptBundle) -> Result<String, BackendError> {
        match PromptKind::of(bundle) {
            Some(PromptKind::Chain(step)) => self.chain_text(step, &bundle.user_text),
            Some(kind) => Err(BackendError::Precondition(format!(
                "{kind:?} prompts need an image"
            ))),
            None => Err(BackendError::InvalidResponse(
                "oracle does not recognise this prompt".into(),
            )),
        }
    }
}

/// Exact footprints for every visible object a label names.
pub struct OracleSegmenter(Arc<OracleWorld>);

impl Endpoint for OracleSegmenter {}

impl Segmenter for OracleSegmenter {
    fn segment(&self, image: &Image, labels: &[String]) -> Result<SegmentResult, BackendError> {
        if labels.is_empty() {
            return Err(BackendError::Precondition(
                "segment needs at least one label".into(),
            ));
        }
        self.0.check_dims(image)?;
        let visible = self.0.visible(image);
        let per_label = labels
            .iter()
            .map(|l| {
                let instances = self
                    .0
                    .scene
                    .find_by_name(l)
                    .filter(|o| visible.contains(&o.id))
                    .map(|o| SegmentInstance {
                        mask: self.0.scene.footprint_mask(o),
                        score: self.0.opts.instance_score,
                    })
                    .into_iter()
                    .collect();
                (l.clone(), instances)
            })
            .collect();
        Ok(SegmentResult { per_label })
    }
}

/// Re-renders the scene without every object the mask fully covers.
/// The faulty variant never removes `spared`.
pub struct OracleRemover {
    world: Arc<OracleWorld>,
    spared: Option<ObjectId>,
}

impl Endpoint for OracleRemover {}

impl Remover for OracleRemover {
    fn remove(&self, image: &Image, mask: &Mask) -> Result<Image, BackendError> {
        let w = &self.world;
        w.check_dims(image)?;
        if mask.dims() != image.dims() {
            return Err(BackendError::Precondition(
                "mask and image sizes differ".into(),
            ));
        }
        let visible = w.visible(image);
        let md = mask.data();
        let mut removed: BTreeSet<ObjectId> = w.scene.ids().difference(&visible).copied().collect();
        for (o, fp) in w.scene.objects.iter().zip(&w.footprints) {
            if Some(o.id) != self.spared && fp.iter().all(|&p| md[p] == 1) {
                removed.insert(o.id);
            }
        }
        Ok(render(&w.scene, &removed))
    }
}

pub fn oracle_backends(scene: SceneGraph) -> BackendSet {
    oracle_backends_with(scene, OracleOptions::default())
}

pub fn oracle_backends_with(scene: SceneGraph, opts: OracleOptions) -> BackendSet {
    let faulty = opts.faulty_object;
    let world = Arc::new(OracleWorld::new(scene, opts));
    let honest = Arc::new(OracleRemover {
        world: world.clone(),
        spared: None,
    });
    let (remover, correction_remover): (Arc<dyn Remover>, Option<Arc<dyn Remover>>) = match faulty {
        Some(id) => (
            Arc::new(OracleRemover {
                world: world.clone(),
                spared: Some(id),
            }),
            Some(honest),
        ),
        None => (honest, None),
    };
    BackendSet {
        vision: world.clone(),
        text: world.clone(),
        segmenter: Arc::new(OracleSegmenter(world)),
        remover,
        correction_remover,
        embedder: None,
        scorer: None,
    }
}
