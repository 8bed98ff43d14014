use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::GenError;

macro_rules! attribute_enum {
    ($name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn word(self) -> &'static str {
                match self {
                    $($name::$variant => $word),+
                }
            }

            pub fn from_word(w: &str) -> Option<Self> {
                Self::ALL.iter().copied().find(|v| v.word() == w)
            }

            pub fn index(self) -> usize {
                self as usize
            }
        }
    };
}

attribute_enum!(Color {
    Blue => "blue",
    Brown => "brown",
    Cyan => "cyan",
    Gray => "gray",
    Green => "green",
    Purple => "purple",
    Red => "red",
    Yellow => "yellow",
});

attribute_enum!(Shape {
    Cylinder => "cylinder",
    Cube => "cube",
    Sphere => "sphere",
});

attribute_enum!(Size {
    Large => "large",
    Small => "small",
});

attribute_enum!(Material {
    Metal => "metal",
    Rubber => "rubber",
});

attribute_enum!(AttrKind {
    Color => "color",
    Shape => "shape",
    Size => "size",
    Material => "material",
});

/// One concrete attribute value, e.g. `red` or `cube`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum AttrValue {
    Color(Color),
    Shape(Shape),
    Size(Size),
    Material(Material),
}

impl AttrValue {
    pub fn kind(self) -> AttrKind {
        match self {
            AttrValue::Color(_) => AttrKind::Color,
            AttrValue::Shape(_) => AttrKind::Shape,
            AttrValue::Size(_) => AttrKind::Size,
            AttrValue::Material(_) => AttrKind::Material,
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            AttrValue::Color(c) => c.word(),
            AttrValue::Shape(s) => s.word(),
            AttrValue::Size(s) => s.word(),
            AttrValue::Material(m) => m.word(),
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Color::from_word(w)
            .map(AttrValue::Color)
            .or_else(|| Shape::from_word(w).map(AttrValue::Shape))
            .or_else(|| Size::from_word(w).map(AttrValue::Size))
            .or_else(|| Material::from_word(w).map(AttrValue::Material))
    }

    /// Every value of every attribute, colors first.
    pub fn all() -> Vec<AttrValue> {
        let mut out: Vec<AttrValue> = Color::ALL.iter().map(|&c| AttrValue::Color(c)).collect();
        out.extend(Shape::ALL.iter().map(|&s| AttrValue::Shape(s)));
        out.extend(Size::ALL.iter().map(|&s| AttrValue::Size(s)));
        out.extend(Material::ALL.iter().map(|&m| AttrValue::Material(m)));
        out
    }

    pub fn all_of(kind: AttrKind) -> Vec<AttrValue> {
        Self::all()
            .into_iter()
            .filter(|v| v.kind() == kind)
            .collect()
    }
}

impl From<AttrValue> for String {
    fn from(v: AttrValue) -> String {
        v.word().to_string()
    }
}

impl TryFrom<String> for AttrValue {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        AttrValue::from_word(&s).ok_or_else(|| format!("unknown attribute value {s:?}"))
    }
}

impl fmt::Display for AttrValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.word())
    }
}

/// Spatial relation between two grid cells. Front/back compare rows (front is
/// the smaller row index), left/right compare columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Front,
    Behind,
    Left,
    Right,
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::Front,
        Relation::Behind,
        Relation::Left,
        Relation::Right,
    ];

    /// True when `other` lies in this direction from `anchor`.
    pub fn holds(self, anchor: (usize, usize), other: (usize, usize)) -> bool {
        match self {
            Relation::Front => other.0 < anchor.0,
            Relation::Behind => other.0 > anchor.0,
            Relation::Left => other.1 < anchor.1,
            Relation::Right => other.1 > anchor.1,
        }
    }

    pub fn words(self) -> &'static [&'static str] {
        match self {
            Relation::Front => &["in", "front", "of"],
            Relation::Behind => &["behind"],
            Relation::Left => &["left", "of"],
            Relation::Right => &["right", "of"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneObject {
    pub color: Color,
    pub shape: Shape,
    pub size: Size,
    pub material: Material,
    pub cell: (usize, usize),
}

impl SceneObject {
    pub fn attr(&self, kind: AttrKind) -> AttrValue {
        match kind {
            AttrKind::Color => AttrValue::Color(self.color),
            AttrKind::Shape => AttrValue::Shape(self.shape),
            AttrKind::Size => AttrValue::Size(self.size),
            AttrKind::Material => AttrValue::Material(self.material),
        }
    }

    pub fn matches(&self, value: AttrValue) -> bool {
        self.attr(value.kind()) == value
    }

    pub fn matches_all(&self, values: &[AttrValue]) -> bool {
        values.iter().all(|&v| self.matches(v))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub grid_size: (usize, usize),
    pub objects: Vec<SceneObject>,
}

impl SceneGraph {
    pub fn cells(&self) -> usize {
        self.grid_size.0 * self.grid_size.1
    }

    /// Row-major cell index.
    pub fn cell_index(&self, cell: (usize, usize)) -> usize {
        cell.0 * self.grid_size.1 + cell.1
    }

    pub fn object_at(&self, cell: (usize, usize)) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.cell == cell)
    }

    pub fn matching(&self, values: &[AttrValue]) -> Vec<usize> {
        (0..self.objects.len())
            .filter(|&i| self.objects[i].matches_all(values))
            .collect()
    }

    /// Indices of objects lying in direction `rel` from object `anchor`.
    pub fn related(&self, anchor: usize, rel: Relation) -> Vec<usize> {
        let a = self.objects[anchor].cell;
        (0..self.objects.len())
            .filter(|&i| i != anchor && rel.holds(a, self.objects[i].cell))
            .collect()
    }

    pub fn validate(&self) -> Result<(), GenError> {
        let (h, w) = self.grid_size;
        if self.objects.len() > h * w {
            return Err(GenError::InvalidScene(format!(
                "{} objects on a {h}x{w} grid",
                self.objects.len()
            )));
        }
        let mut seen = vec![false; h * w];
        for o in &self.objects {
            if o.cell.0 >= h || o.cell.1 >= w {
                return Err(GenError::InvalidScene(format!(
                    "cell {:?} outside grid",
                    o.cell
                )));
            }
            let idx = self.cell_index(o.cell);
            if seen[idx] {
                return Err(GenError::InvalidScene(format!(
                    "two objects share cell {:?}",
                    o.cell
                )));
            }
            seen[idx] = true;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub grid: (usize, usize),
    pub min_objects: usize,
    pub max_objects: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            grid: (4, 4),
            min_objects: 3,
            max_objects: 6,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        let cells = self.grid.0 * self.grid.1;
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return Err(GenError::InfeasibleConfig("grid has no cells".into()));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > cells
        {
            return Err(GenError::InfeasibleConfig(format!(
                "object range {}..={} does not fit a {}x{} grid",
                self.min_objects, self.max_objects, self.grid.0, self.grid.1
            )));
        }
        Ok(())
    }
}

/// Uniform attributes on distinct uniformly chosen cells.
pub fn sample_scene<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &SceneConfig,
) -> Result<SceneGraph, GenError> {
    cfg.validate()?;
    let (h, w) = cfg.grid;
    let count = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut cells: Vec<(usize, usize)> = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).collect();
    cells.shuffle(rng);
    let objects = cells[..count]
        .iter()
        .map(|&cell| SceneObject {
            color: Color::ALL[rng.random_range(0..Color::ALL.len())],
            shape: Shape::ALL[rng.random_range(0..Shape::ALL.len())],
            size: Size::ALL[rng.random_range(0..Size::ALL.len())],
            material: Material::ALL[rng.random_range(0..Material::ALL.len())],
            cell,
        })
        .collect();
    Ok(SceneGraph {
        grid_size: cfg.grid,
        objects,
    })
}
