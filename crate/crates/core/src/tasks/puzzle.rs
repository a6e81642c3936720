use serde::{Deserialize, Serialize};

use super::panel::{Attribute, Panel};
use super::rule::{Concept, RuleDescriptor, RuleKind, Transform};
use super::vocab::{Token, MAX_OPTIONS};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Puzzle {
    pub question_panels: Vec<Panel>,
    pub option_panels: Vec<Panel>,
    pub answer_index: usize,
    pub rule: RuleDescriptor,
    /// Empty until a rationale is attached.
    pub rationale: Vec<Token>,
}

impl Puzzle {
    pub fn num_options(&self) -> usize {
        self.option_panels.len()
    }

    pub fn answer_panel(&self) -> &Panel {
        &self.option_panels[self.answer_index]
    }

    /// Structural checks: option count, answer index, rule legality.
    pub fn validate(&self) -> Result<()> {
        let k = self.option_panels.len();
        if !(2..=MAX_OPTIONS).contains(&k) {
            return Err(Error::arg(format!("option count {k} outside 2..={MAX_OPTIONS}")));
        }
        if self.answer_index >= k {
            return Err(Error::arg(format!("answer index {} out of range for {k} options", self.answer_index)));
        }
        self.rule.validate()
    }

    /// Whether option `i` obeys the rule given the question panels.
    pub fn option_satisfies(&self, i: usize) -> Result<bool> {
        let opt = self
            .option_panels
            .get(i)
            .ok_or_else(|| Error::arg(format!("option {i} out of range")))?;
        let q = &self.question_panels;
        let r = &self.rule;
        match r.rule_kind {
            RuleKind::Progression | RuleKind::Constancy | RuleKind::Xor => {
                if q.len() != 8 {
                    return Err(Error::arg(format!("matrix puzzle needs 8 question panels, got {}", q.len())));
                }
                let expected = match r.rule_kind {
                    RuleKind::Progression => q[7].value(r.attribute).map(|v| v as i64 + r.step().unwrap_or(0)),
                    RuleKind::Constancy => q[6].value(r.attribute).map(|v| v as i64),
                    _ => Some((q[6].mask() ^ q[7].mask()) as i64),
                };
                Ok(expected.is_some() && opt.value(r.attribute).map(|v| v as i64) == expected)
            }
            RuleKind::ConceptMembership => Ok(concept_holds(r.concept_kind()?, opt)),
            RuleKind::Transformation => {
                let input = q.last().ok_or_else(|| Error::arg("transformation puzzle has no question panels"))?;
                Ok(apply_transform(r.transform_kind()?, input, u8::MAX).is_ok_and(|out| &out == opt))
            }
            RuleKind::OddOneOut => {
                let vals: Vec<Option<u64>> = self.option_panels.iter().map(|p| p.value(r.attribute)).collect();
                let mine = match vals[i] {
                    Some(v) => v,
                    None => return Ok(false),
                };
                let mut others = vals.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| *v);
                let first = others.next().flatten();
                Ok(match first {
                    Some(c) => c != mine && others.all(|v| v == Some(c)),
                    None => false,
                })
            }
        }
    }

    /// Indices of every option the checker accepts.
    pub fn satisfying_options(&self) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for i in 0..self.option_panels.len() {
            if self.option_satisfies(i)? {
                out.push(i);
            }
        }
        Ok(out)
    }
}

/// Concept predicate shared by the Bongard generator and the checker.
pub fn concept_holds(c: Concept, p: &Panel) -> bool {
    match c {
        Concept::Monochrome => p.count() >= 2 && p.value(Attribute::Color).is_some(),
        Concept::SameShape => p.count() >= 2 && p.value(Attribute::Shape).is_some(),
        Concept::ContainsColor(col) => p.cells().iter().any(|x| x.present && x.color == col),
        Concept::CountAtLeast(k) => p.count() >= k as usize,
        Concept::MirrorSymmetric => p.count() >= 1 && p.reflect_horizontal().mask() == p.mask(),
        Concept::FullRow => (0..p.height()).any(|r| (0..p.width()).all(|c| p.at(r, c).present)),
    }
}

/// Applies a transformation. `sizes` bounds the grow operation; pass
/// `u8::MAX` when only the shape of the result matters.
pub fn apply_transform(t: Transform, p: &Panel, sizes: u8) -> Result<Panel> {
    Ok(match t {
        Transform::Identity => p.clone(),
        Transform::Recolor { from, to } => {
            let mut out = p.clone();
            for c in out.cells_mut().iter_mut().filter(|c| c.present && c.color == from) {
                c.color = to;
            }
            out
        }
        Transform::ReflectHorizontal => p.reflect_horizontal(),
        Transform::Grow => {
            let mut out = p.clone();
            for c in out.cells_mut().iter_mut().filter(|c| c.present) {
                if c.size as u16 + 1 >= sizes as u16 {
                    return Err(Error::Generation(format!("cannot grow size {} within {sizes} sizes", c.size)));
                }
                c.size += 1;
            }
            out
        }
        Transform::Rotate90 => {
            if p.width() != p.height() {
                return Err(Error::Generation(format!(
                    "rotation needs a square panel, got {}x{}",
                    p.height(),
                    p.width()
                )));
            }
            p.rotate90()
        }
    })
}
