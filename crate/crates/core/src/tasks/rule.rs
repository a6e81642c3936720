use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::panel::{AttrSpace, Attribute};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Fluid,
    Crystallized,
    Visuospatial,
    MentalSimulation,
    VisualRoutines,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Fluid,
        Category::Crystallized,
        Category::Visuospatial,
        Category::MentalSimulation,
        Category::VisualRoutines,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Fluid => "fluid",
            Category::Crystallized => "crystallized",
            Category::Visuospatial => "visuospatial",
            Category::MentalSimulation => "mental_simulation",
            Category::VisualRoutines => "visual_routines",
        }
    }

    pub fn index(self) -> usize {
        Category::ALL.iter().position(|&c| c == self).unwrap_or(0)
    }

    /// Rule kinds this category may use.
    pub fn kinds(self) -> &'static [RuleKind] {
        match self {
            Category::Fluid => &[RuleKind::Progression, RuleKind::Xor, RuleKind::Constancy],
            Category::Crystallized | Category::Visuospatial => &[RuleKind::ConceptMembership],
            Category::MentalSimulation => &[RuleKind::Transformation],
            Category::VisualRoutines => &[RuleKind::OddOneOut],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Progression,
    Xor,
    Constancy,
    ConceptMembership,
    Transformation,
    OddOneOut,
}

impl RuleKind {
    pub fn name(self) -> &'static str {
        match self {
            RuleKind::Progression => "progression",
            RuleKind::Xor => "xor",
            RuleKind::Constancy => "constancy",
            RuleKind::ConceptMembership => "concept_membership",
            RuleKind::Transformation => "transformation",
            RuleKind::OddOneOut => "odd_one_out",
        }
    }
}

/// Hidden concept separating Bongard positives from negatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Concept {
    Monochrome,
    SameShape,
    ContainsColor(u8),
    CountAtLeast(u8),
    MirrorSymmetric,
    FullRow,
}

impl Concept {
    pub fn attribute(self) -> Attribute {
        match self {
            Concept::Monochrome | Concept::ContainsColor(_) => Attribute::Color,
            Concept::SameShape => Attribute::Shape,
            Concept::CountAtLeast(_) => Attribute::Count,
            Concept::MirrorSymmetric | Concept::FullRow => Attribute::Presence,
        }
    }

    pub fn category(self) -> Category {
        match self {
            Concept::Monochrome | Concept::SameShape | Concept::ContainsColor(_) => Category::Crystallized,
            _ => Category::Visuospatial,
        }
    }

    fn to_params(self) -> Vec<i64> {
        match self {
            Concept::Monochrome => vec![0],
            Concept::SameShape => vec![1],
            Concept::ContainsColor(c) => vec![2, c as i64],
            Concept::CountAtLeast(k) => vec![3, k as i64],
            Concept::MirrorSymmetric => vec![4],
            Concept::FullRow => vec![5],
        }
    }

    fn from_params(p: &[i64]) -> Result<Self> {
        let arg = |i: usize| -> Result<u8> {
            p.get(i)
                .and_then(|&v| u8::try_from(v).ok())
                .ok_or_else(|| Error::arg(format!("concept parameters {p:?} lack a valid argument")))
        };
        Ok(match p.first() {
            Some(0) => Concept::Monochrome,
            Some(1) => Concept::SameShape,
            Some(2) => Concept::ContainsColor(arg(1)?),
            Some(3) => Concept::CountAtLeast(arg(1)?),
            Some(4) => Concept::MirrorSymmetric,
            Some(5) => Concept::FullRow,
            _ => return Err(Error::arg(format!("unknown concept parameters {p:?}"))),
        })
    }
}

/// Grid transformation for mental-simulation puzzles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    Identity,
    Recolor { from: u8, to: u8 },
    ReflectHorizontal,
    Grow,
    Rotate90,
}

impl Transform {
    pub fn attribute(self) -> Attribute {
        match self {
            Transform::Recolor { .. } => Attribute::Color,
            Transform::Grow => Attribute::Size,
            _ => Attribute::Presence,
        }
    }

    fn to_params(self) -> Vec<i64> {
        match self {
            Transform::Identity => vec![0],
            Transform::Recolor { from, to } => vec![1, from as i64, to as i64],
            Transform::ReflectHorizontal => vec![2],
            Transform::Grow => vec![3],
            Transform::Rotate90 => vec![4],
        }
    }

    fn from_params(p: &[i64]) -> Result<Self> {
        let arg = |i: usize| -> Result<u8> {
            p.get(i)
                .and_then(|&v| u8::try_from(v).ok())
                .ok_or_else(|| Error::arg(format!("transform parameters {p:?} lack a valid argument")))
        };
        Ok(match p.first() {
            Some(0) => Transform::Identity,
            Some(1) => Transform::Recolor { from: arg(1)?, to: arg(2)? },
            Some(2) => Transform::ReflectHorizontal,
            Some(3) => Transform::Grow,
            Some(4) => Transform::Rotate90,
            _ => return Err(Error::arg(format!("unknown transform parameters {p:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleDescriptor {
    pub category: Category,
    pub rule_kind: RuleKind,
    pub attribute: Attribute,
    pub parameters: Vec<i64>,
}

impl RuleDescriptor {
    pub fn new(category: Category, rule_kind: RuleKind, attribute: Attribute, parameters: Vec<i64>) -> Result<Self> {
        let r = RuleDescriptor { category, rule_kind, attribute, parameters };
        r.validate()?;
        Ok(r)
    }

    pub fn progression(attribute: Attribute, step: i64) -> Result<Self> {
        Self::new(Category::Fluid, RuleKind::Progression, attribute, vec![step])
    }

    pub fn constancy(attribute: Attribute) -> Result<Self> {
        Self::new(Category::Fluid, RuleKind::Constancy, attribute, vec![])
    }

    pub fn xor() -> Self {
        RuleDescriptor { category: Category::Fluid, rule_kind: RuleKind::Xor, attribute: Attribute::Presence, parameters: vec![] }
    }

    pub fn concept(c: Concept) -> Self {
        RuleDescriptor {
            category: c.category(),
            rule_kind: RuleKind::ConceptMembership,
            attribute: c.attribute(),
            parameters: c.to_params(),
        }
    }

    pub fn transform(t: Transform) -> Self {
        RuleDescriptor {
            category: Category::MentalSimulation,
            rule_kind: RuleKind::Transformation,
            attribute: t.attribute(),
            parameters: t.to_params(),
        }
    }

    pub fn odd_one_out(attribute: Attribute) -> Result<Self> {
        Self::new(Category::VisualRoutines, RuleKind::OddOneOut, attribute, vec![])
    }

    /// Checks the category/kind table and the attribute each kind may bind.
    pub fn validate(&self) -> Result<()> {
        if !self.category.kinds().contains(&self.rule_kind) {
            return Err(Error::arg(format!(
                "rule kind {} is not legal for category {}",
                self.rule_kind.name(),
                self.category.name()
            )));
        }
        let attr_ok = match self.rule_kind {
            RuleKind::Progression | RuleKind::Constancy => self.attribute != Attribute::Presence,
            RuleKind::Xor => self.attribute == Attribute::Presence,
            RuleKind::OddOneOut => matches!(self.attribute, Attribute::Shape | Attribute::Color | Attribute::Size),
            RuleKind::ConceptMembership => {
                let c = self.concept_kind()?;
                c.attribute() == self.attribute && c.category() == self.category
            }
            RuleKind::Transformation => self.transform_kind()?.attribute() == self.attribute,
        };
        if !attr_ok {
            return Err(Error::arg(format!("rule {} cannot bind attribute {}", self.rule_kind.name(), self.attribute.name())));
        }
        if self.rule_kind == RuleKind::Progression {
            match self.parameters.as_slice() {
                [s] if *s != 0 => {}
                p => return Err(Error::arg(format!("progression needs one nonzero step, got {p:?}"))),
            }
        }
        Ok(())
    }

    pub fn concept_kind(&self) -> Result<Concept> {
        if self.rule_kind != RuleKind::ConceptMembership {
            return Err(Error::arg("not a concept rule"));
        }
        Concept::from_params(&self.parameters)
    }

    pub fn transform_kind(&self) -> Result<Transform> {
        if self.rule_kind != RuleKind::Transformation {
            return Err(Error::arg("not a transformation rule"));
        }
        Transform::from_params(&self.parameters)
    }

    pub fn step(&self) -> Result<i64> {
        match (self.rule_kind, self.parameters.as_slice()) {
            (RuleKind::Progression, [s]) => Ok(*s),
            _ => Err(Error::arg("not a progression rule")),
        }
    }
}

/// Draws a legal rule for `category`.
pub fn sample_rule<R: Rng>(rng: &mut R, category: Category, space: &AttrSpace, panel_cells: usize) -> RuleDescriptor {
    use Attribute::*;
    match category {
        Category::Fluid => match rng.gen_range(0..3) {
            0 => {
                let attr = *[Shape, Color, Size, Count].choose(rng).unwrap();
                let step = if rng.gen_bool(0.5) { 1 } else { -1 };
                RuleDescriptor { category, rule_kind: RuleKind::Progression, attribute: attr, parameters: vec![step] }
            }
            1 => RuleDescriptor::xor(),
            _ => {
                let attr = *[Shape, Color, Size, Count].choose(rng).unwrap();
                RuleDescriptor { category, rule_kind: RuleKind::Constancy, attribute: attr, parameters: vec![] }
            }
        },
        Category::Crystallized => RuleDescriptor::concept(match rng.gen_range(0..3) {
            0 => Concept::Monochrome,
            1 => Concept::SameShape,
            _ => Concept::ContainsColor(rng.gen_range(0..space.colors)),
        }),
        Category::Visuospatial => RuleDescriptor::concept(match rng.gen_range(0..3) {
            0 => Concept::CountAtLeast(rng.gen_range(2..=(panel_cells as u8 / 2 + 1).max(2))),
            1 => Concept::MirrorSymmetric,
            _ => Concept::FullRow,
        }),
        Category::MentalSimulation => {
            let t = match rng.gen_range(0..5) {
                0 => Transform::Identity,
                1 => {
                    let from = rng.gen_range(0..space.colors);
                    let to = (from + rng.gen_range(1..space.colors)) % space.colors;
                    Transform::Recolor { from, to }
                }
                2 => Transform::ReflectHorizontal,
                3 => Transform::Grow,
                _ => Transform::Rotate90,
            };
            RuleDescriptor::transform(t)
        }
        Category::VisualRoutines => RuleDescriptor {
            category,
            rule_kind: RuleKind::OddOneOut,
            attribute: *[Shape, Color, Size].choose(rng).unwrap(),
            parameters: vec![],
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn illegal_kind_for_category_rejected() {
        assert!(RuleDescriptor::new(Category::Crystallized, RuleKind::Xor, Attribute::Presence, vec![]).is_err());
        assert!(RuleDescriptor::new(Category::Fluid, RuleKind::Xor, Attribute::Color, vec![]).is_err());
        assert!(RuleDescriptor::progression(Attribute::Count, 0).is_err());
    }

    #[test]
    fn sampled_rules_are_legal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            for c in Category::ALL {
                let r = sample_rule(&mut rng, c, &AttrSpace::default(), 9);
                r.validate().unwrap();
                assert_eq!(r.category, c);
            }
        }
    }

    #[test]
    fn params_round_trip() {
        for c in [Concept::ContainsColor(3), Concept::CountAtLeast(2), Concept::FullRow] {
            assert_eq!(RuleDescriptor::concept(c).concept_kind().unwrap(), c);
        }
        let t = Transform::Recolor { from: 0, to: 1 };
        assert_eq!(RuleDescriptor::transform(t).transform_kind().unwrap(), t);
    }
}
