//! Object classes built from surface primitives, the seen affordance words,
//! their synonyms, and which part each affordance targets per class.

use crate::backbone::Point;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    /// Axis-aligned box: center and half extents.
    Box { c: Point, h: Point },
    /// Cylinder along `axis` (0 = x, 1 = y, 2 = z) with half height `hh`.
    Cylinder { c: Point, r: f64, hh: f64, axis: usize },
    Sphere { c: Point, r: f64 },
    /// Flat disk facing `axis`.
    Disk { c: Point, r: f64, axis: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartSpec {
    pub name: &'static str,
    pub prims: Vec<Primitive>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassSpec {
    pub name: &'static str,
    pub parts: Vec<PartSpec>,
    /// `(affordance word, part name)`.
    pub affordances: Vec<(&'static str, &'static str)>,
}

impl ClassSpec {
    pub fn part_names(&self) -> Vec<&'static str> {
        self.parts.iter().map(|p| p.name).collect()
    }

    pub fn part_index(&self, name: &str) -> Option<usize> {
        self.parts.iter().position(|p| p.name == name)
    }

    pub fn target_part(&self, affordance: &str) -> Option<&'static str> {
        self.affordances
            .iter()
            .find(|(a, _)| *a == affordance)
            .map(|(_, p)| *p)
    }
}

/// Seen affordances; the position is the affordance id.
pub const SEEN_AFFORDANCES: [&str; 17] = [
    "grasp", "lift", "open", "contain", "pour", "sit", "support", "push", "pull", "cut", "stab",
    "display", "listen", "wear", "lay", "press", "wrap",
];

/// Unseen word → the seen affordance it means.
pub const SYNONYMS: [(&str, &str); 17] = [
    ("grip", "grasp"),
    ("raise", "lift"),
    ("unseal", "open"),
    ("store", "contain"),
    ("dispense", "pour"),
    ("perch", "sit"),
    ("prop", "support"),
    ("shove", "push"),
    ("tug", "pull"),
    ("slice", "cut"),
    ("pierce", "stab"),
    ("demonstrate", "display"),
    ("hear", "listen"),
    ("don", "wear"),
    ("recline", "lay"),
    ("tap", "press"),
    ("encircle", "wrap"),
];

pub fn affordance_id(word: &str) -> Option<usize> {
    SEEN_AFFORDANCES.iter().position(|&a| a == word)
}

pub fn synonym_of(seen: &str) -> Option<&'static str> {
    SYNONYMS.iter().find(|(_, s)| *s == seen).map(|(u, _)| *u)
}

/// Seen id an affordance word resolves to, whether seen or a synonym.
pub fn resolve(word: &str) -> Option<usize> {
    affordance_id(word).or_else(|| {
        SYNONYMS
            .iter()
            .find(|(u, _)| *u == word)
            .and_then(|(_, s)| affordance_id(s))
    })
}

fn b(c: Point, h: Point) -> Primitive {
    Primitive::Box { c, h }
}

fn cyl(c: Point, r: f64, hh: f64, axis: usize) -> Primitive {
    Primitive::Cylinder { c, r, hh, axis }
}

fn part(name: &'static str, prims: Vec<Primitive>) -> PartSpec {
    PartSpec { name, prims }
}

/// All classes. The last three are the default held-out classes.
pub fn catalog() -> Vec<ClassSpec> {
    vec![
        ClassSpec {
            name: "bag",
            parts: vec![
                part("body", vec![b([0.0, 0.0, 0.0], [0.5, 0.35, 0.2])]),
                part("strap", vec![b([0.0, 0.6, 0.0], [0.3, 0.05, 0.05])]),
                part("zipper", vec![b([0.0, 0.2, 0.22], [0.4, 0.03, 0.02])]),
            ],
            affordances: vec![("grasp", "strap"), ("lift", "strap"), ("open", "zipper"), ("contain", "body")],
        },
        ClassSpec {
            name: "mug",
            parts: vec![
                part("body", vec![cyl([0.0, 0.0, 0.0], 0.35, 0.4, 1)]),
                part("handle", vec![b([0.5, 0.0, 0.0], [0.08, 0.25, 0.05])]),
            ],
            affordances: vec![("grasp", "handle"), ("lift", "handle"), ("contain", "body"), ("pour", "body")],
        },
        ClassSpec {
            name: "chair",
            parts: vec![
                part("seat", vec![b([0.0, 0.0, 0.0], [0.4, 0.05, 0.4])]),
                part("back", vec![b([0.0, 0.45, -0.38], [0.4, 0.4, 0.04])]),
                part("leg", vec![cyl([0.0, -0.35, 0.0], 0.08, 0.35, 1)]),
            ],
            affordances: vec![("sit", "seat"), ("support", "leg"), ("push", "back")],
        },
        ClassSpec {
            name: "table",
            parts: vec![
                part("top", vec![b([0.0, 0.3, 0.0], [0.7, 0.04, 0.45])]),
                part("leg", vec![cyl([0.0, -0.15, 0.0], 0.1, 0.42, 1)]),
                part("drawer", vec![b([0.0, 0.18, 0.3], [0.3, 0.07, 0.12])]),
            ],
            affordances: vec![("support", "leg"), ("display", "top"), ("pull", "drawer"), ("open", "drawer")],
        },
        ClassSpec {
            name: "knife",
            parts: vec![
                part("blade", vec![b([0.35, 0.0, 0.0], [0.4, 0.1, 0.01])]),
                part("handle", vec![cyl([-0.3, 0.0, 0.0], 0.05, 0.25, 0)]),
            ],
            affordances: vec![("cut", "blade"), ("stab", "blade"), ("grasp", "handle")],
        },
        ClassSpec {
            name: "door",
            parts: vec![
                part("panel", vec![b([0.0, 0.0, 0.0], [0.45, 0.9, 0.04])]),
                part("handle", vec![cyl([0.3, 0.0, 0.1], 0.03, 0.12, 0)]),
                part("hinge", vec![cyl([-0.45, 0.0, 0.0], 0.03, 0.8, 1)]),
            ],
            affordances: vec![("open", "handle"), ("pull", "handle"), ("push", "panel")],
        },
        ClassSpec {
            name: "headset",
            parts: vec![
                part("band", vec![b([0.0, 0.45, 0.0], [0.4, 0.05, 0.08])]),
                part(
                    "earcup",
                    vec![
                        Primitive::Sphere { c: [-0.45, 0.0, 0.0], r: 0.18 },
                        Primitive::Sphere { c: [0.45, 0.0, 0.0], r: 0.18 },
                    ],
                ),
                part("mic", vec![cyl([0.3, -0.25, 0.15], 0.03, 0.15, 0)]),
            ],
            affordances: vec![("listen", "earcup"), ("wear", "band")],
        },
        ClassSpec {
            name: "bed",
            parts: vec![
                part("mattress", vec![b([0.0, 0.0, 0.0], [0.5, 0.1, 0.9])]),
                part("frame", vec![b([0.0, -0.22, 0.0], [0.55, 0.1, 0.95])]),
                part("pillow", vec![b([0.0, 0.16, -0.7], [0.3, 0.05, 0.15])]),
            ],
            affordances: vec![("lay", "mattress"), ("sit", "mattress"), ("support", "frame")],
        },
        ClassSpec {
            name: "keyboard",
            parts: vec![
                part("keys", vec![b([0.0, 0.07, 0.0], [0.6, 0.03, 0.2])]),
                part("case", vec![b([0.0, 0.0, 0.0], [0.65, 0.04, 0.25])]),
                part("cable", vec![cyl([0.0, 0.0, 0.5], 0.02, 0.25, 2)]),
            ],
            affordances: vec![("press", "keys"), ("support", "case"), ("wrap", "cable")],
        },
        ClassSpec {
            name: "bottle",
            parts: vec![
                part("body", vec![cyl([0.0, -0.2, 0.0], 0.3, 0.5, 1)]),
                part("neck", vec![cyl([0.0, 0.45, 0.0], 0.12, 0.15, 1)]),
                part("cap", vec![cyl([0.0, 0.65, 0.0], 0.14, 0.05, 1)]),
            ],
            affordances: vec![("contain", "body"), ("pour", "neck"), ("open", "cap"), ("grasp", "neck")],
        },
        ClassSpec {
            name: "monitor",
            parts: vec![
                part("screen", vec![b([0.0, 0.35, 0.0], [0.6, 0.35, 0.03])]),
                part("stand", vec![cyl([0.0, -0.15, 0.0], 0.05, 0.2, 1)]),
                part("base", vec![Primitive::Disk { c: [0.0, -0.35, 0.0], r: 0.3, axis: 1 }]),
            ],
            affordances: vec![("display", "screen"), ("support", "base"), ("lift", "stand")],
        },
        ClassSpec {
            name: "scissors",
            parts: vec![
                part("blade", vec![b([0.3, 0.0, 0.0], [0.3, 0.05, 0.01])]),
                part(
                    "handle",
                    vec![
                        Primitive::Disk { c: [-0.25, 0.1, 0.0], r: 0.12, axis: 2 },
                        Primitive::Disk { c: [-0.25, -0.1, 0.0], r: 0.12, axis: 2 },
                    ],
                ),
            ],
            affordances: vec![("cut", "blade"), ("grasp", "handle")],
        },
    ]
}
