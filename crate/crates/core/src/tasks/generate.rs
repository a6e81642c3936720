use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::panel::{AttrSpace, Attribute, Cell, Panel};
use super::puzzle::{apply_transform, concept_holds, Puzzle};
use super::rule::{Category, Concept, RuleDescriptor, RuleKind, Transform};
use super::vocab::MAX_OPTIONS;
use crate::error::{Error, Result};

const MAX_ATTEMPTS: usize = 2000;

/// Panel geometry and option count for every generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub space: AttrSpace,
    pub num_options: usize,
    pub matrix_side: usize,
    pub bongard_side: usize,
    pub bongard_positives: usize,
    pub transform_side: usize,
    pub transform_pairs: usize,
    pub odd_side: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            space: AttrSpace::default(),
            num_options: 4,
            matrix_side: 2,
            bongard_side: 3,
            bongard_positives: 4,
            transform_side: 3,
            transform_pairs: 2,
            odd_side: 3,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_OPTIONS).contains(&self.num_options) {
            return Err(Error::arg(format!("num_options {} outside 2..={MAX_OPTIONS}", self.num_options)));
        }
        if self.space.shapes == 0 || self.space.colors == 0 || self.space.sizes == 0 {
            return Err(Error::arg("attribute ranges must be nonzero"));
        }
        if self.space.shapes > 10 || self.space.colors > 10 || self.space.sizes > 10 {
            return Err(Error::arg("attribute ranges above 10 cannot be spelled with digit tokens"));
        }
        Ok(())
    }

    /// Cells per panel for a category; used when sampling rule parameters.
    pub fn panel_cells(&self, c: Category) -> usize {
        let s = match c {
            Category::Fluid => self.matrix_side,
            Category::Crystallized | Category::Visuospatial => self.bongard_side,
            Category::MentalSimulation => self.transform_side,
            Category::VisualRoutines => self.odd_side,
        };
        s * s
    }
}

fn expect(rule: &RuleDescriptor, cats: &[Category], kinds: &[RuleKind]) -> Result<()> {
    rule.validate()?;
    if !cats.contains(&rule.category) || !kinds.contains(&rule.rule_kind) {
        return Err(Error::arg(format!(
            "generator cannot handle {} / {}",
            rule.category.name(),
            rule.rule_kind.name()
        )));
    }
    Ok(())
}

/// Number of distinct panel-level values an attribute can take.
fn value_range(attr: Attribute, cells: usize, space: &AttrSpace) -> u64 {
    match attr {
        Attribute::Count => cells as u64 + 1,
        Attribute::Presence => 1 << cells,
        a => space.range(a) as u64,
    }
}

/// Random panel whose panel-level `attr` value is `v`.
fn realize<R: Rng>(rng: &mut R, side: usize, attr: Attribute, v: u64, space: &AttrSpace) -> Result<Panel> {
    let cells = side * side;
    match attr {
        Attribute::Count => Panel::random_with_count(rng, side, side, v as usize, space),
        Attribute::Presence => Panel::random_with_mask(rng, side, side, v, space),
        _ => {
            let n = rng.gen_range(1..=cells);
            let mut p = Panel::random_with_count(rng, side, side, n, space)?;
            p.set_all(attr, v as u8);
            Ok(p)
        }
    }
}

/// Copy of `base` whose bound value becomes `v`, leaving other cells alone
/// where possible.
fn alter<R: Rng>(rng: &mut R, base: &Panel, attr: Attribute, v: u64, space: &AttrSpace) -> Panel {
    let mut p = base.clone();
    match attr {
        Attribute::Count => {
            let cur = p.count() as u64;
            let (pool, add): (Vec<usize>, bool) = if v > cur {
                ((0..p.cells().len()).filter(|&i| !p.cells()[i].present).collect(), true)
            } else {
                ((0..p.cells().len()).filter(|&i| p.cells()[i].present).collect(), false)
            };
            let n = cur.abs_diff(v) as usize;
            for &i in pool.choose_multiple(rng, n) {
                p.cells_mut()[i] = if add { Cell::random_object(rng, space) } else { Cell::EMPTY };
            }
        }
        Attribute::Presence => {
            for i in 0..p.cells().len() {
                let want = v >> i & 1 == 1;
                if want && !p.cells()[i].present {
                    p.cells_mut()[i] = Cell::random_object(rng, space);
                } else if !want {
                    p.cells_mut()[i] = Cell::EMPTY;
                }
            }
        }
        _ => p.set_all(attr, v as u8),
    }
    p
}

/// 3x3 matrix with the last panel missing. Rows follow the rule.
pub fn gen_matrix_puzzle(rule: &RuleDescriptor, seed: u64, cfg: &TaskConfig) -> Result<Puzzle> {
    expect(rule, &[Category::Fluid], &[RuleKind::Progression, RuleKind::Xor, RuleKind::Constancy])?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = cfg.matrix_side;
    let cells = side * side;
    let attr = rule.attribute;
    let range = value_range(attr, cells, &cfg.space);
    let k = cfg.num_options;

    let mut grid: Vec<u64> = Vec::with_capacity(9);
    for _ in 0..3 {
        match rule.rule_kind {
            RuleKind::Progression => {
                let s = rule.step()?;
                let span = 2 * s.unsigned_abs();
                if span >= range {
                    return Err(Error::Generation(format!(
                        "progression step {s} does not fit {range} values of {}",
                        attr.name()
                    )));
                }
                let lo = rng.gen_range(0..range - span);
                let start = if s > 0 { lo } else { lo + span };
                for j in 0..3 {
                    grid.push((start as i64 + j * s) as u64);
                }
            }
            RuleKind::Constancy => {
                let v = rng.gen_range(0..range);
                grid.extend([v; 3]);
            }
            _ => {
                let a = rng.gen_range(0..range);
                let b = rng.gen_range(0..range);
                grid.extend([a, b, a ^ b]);
            }
        }
    }
    let target = grid[8];
    if (range - 1) < (k as u64 - 1) {
        return Err(Error::Generation(format!(
            "{} has {range} values, too few for {k} distinct options",
            attr.name()
        )));
    }

    let panels = grid
        .iter()
        .map(|&v| realize(&mut rng, side, attr, v, &cfg.space))
        .collect::<Result<Vec<_>>>()?;
    let answer = panels[8].clone();

    let mut alternatives: Vec<u64> = if attr == Attribute::Presence {
        // nearest masks first so distractors differ from the answer minimally
        let mut flips: Vec<u64> = (0..cells).map(|i| target ^ (1 << i)).collect();
        flips.shuffle(&mut rng);
        if flips.len() < k - 1 {
            let mut rest: Vec<u64> = (0..range).filter(|&m| m != target && !flips.contains(&m)).collect();
            rest.shuffle(&mut rng);
            flips.extend(rest);
        }
        flips
    } else {
        let mut v: Vec<u64> = (0..range).filter(|&x| x != target).collect();
        v.shuffle(&mut rng);
        v
    };
    alternatives.truncate(k - 1);
    let mut options: Vec<Panel> = alternatives.iter().map(|&d| alter(&mut rng, &answer, attr, d, &cfg.space)).collect();
    let answer_index = rng.gen_range(0..k);
    options.insert(answer_index, answer);

    let puzzle = Puzzle {
        question_panels: panels[..8].to_vec(),
        option_panels: options,
        answer_index,
        rule: rule.clone(),
        rationale: vec![],
    };
    Ok(puzzle)
}

fn random_panel<R: Rng>(rng: &mut R, side: usize, min_count: usize, space: &AttrSpace) -> Result<Panel> {
    let cells = side * side;
    let n = rng.gen_range(min_count.min(cells)..=cells);
    Panel::random_with_count(rng, side, side, n, space)
}

fn propose<R: Rng>(rng: &mut R, c: Concept, positive: bool, side: usize, space: &AttrSpace) -> Result<Panel> {
    let cells = side * side;
    let mut p = random_panel(rng, side, 2, space)?;
    match (c, positive) {
        (Concept::Monochrome, true) => p.set_all(Attribute::Color, rng.gen_range(0..space.colors)),
        (Concept::SameShape, true) => p.set_all(Attribute::Shape, rng.gen_range(0..space.shapes)),
        (Concept::Monochrome | Concept::SameShape, false) => {
            let attr = c.attribute();
            let range = space.range(attr);
            if p.value(attr).is_some() && range > 1 {
                let present: Vec<usize> = (0..cells).filter(|&i| p.cells()[i].present).collect();
                let &i = present.choose(rng).unwrap();
                let old = p.cells()[i].get(attr);
                p.cells_mut()[i].set(attr, (old + rng.gen_range(1..range)) % range);
            }
        }
        (Concept::ContainsColor(col), true) => {
            let present: Vec<usize> = (0..cells).filter(|&i| p.cells()[i].present).collect();
            let n = rng.gen_range(1..=present.len());
            for &i in present.choose_multiple(rng, n) {
                p.cells_mut()[i].color = col;
            }
        }
        (Concept::ContainsColor(col), false) => {
            if space.colors > 1 {
                for x in p.cells_mut().iter_mut().filter(|x| x.present && x.color == col) {
                    x.color = (col + rng.gen_range(1..space.colors)) % space.colors;
                }
            }
        }
        (Concept::CountAtLeast(k), true) => {
            let k = k as usize;
            if k <= cells {
                let n = rng.gen_range(k..=cells);
                p = Panel::random_with_count(rng, side, side, n, space)?;
            }
        }
        (Concept::CountAtLeast(k), false) => {
            if k > 0 {
                let hi = (k as usize - 1).min(cells);
                let n = rng.gen_range(0..=hi);
                p = Panel::random_with_count(rng, side, side, n, space)?;
            }
        }
        (Concept::MirrorSymmetric, true) => {
            for r in 0..side {
                for col in 0..side / 2 {
                    let x = *p.at(r, col);
                    *p.at_mut(r, side - 1 - col) = if x.present { Cell::random_object(rng, space) } else { Cell::EMPTY };
                }
            }
        }
        (Concept::MirrorSymmetric, false) => {}
        (Concept::FullRow, true) => {
            let r = rng.gen_range(0..side);
            for col in 0..side {
                if !p.at(r, col).present {
                    *p.at_mut(r, col) = Cell::random_object(rng, space);
                }
            }
        }
        (Concept::FullRow, false) => {
            for r in 0..side {
                if (0..side).all(|col| p.at(r, col).present) {
                    let col = rng.gen_range(0..side);
                    *p.at_mut(r, col) = Cell::EMPTY;
                }
            }
        }
    }
    Ok(p)
}

fn sample_member<R: Rng>(rng: &mut R, c: Concept, positive: bool, side: usize, space: &AttrSpace) -> Result<Panel> {
    for _ in 0..MAX_ATTEMPTS {
        let p = propose(rng, c, positive, side, space)?;
        if concept_holds(c, &p) == positive {
            return Ok(p);
        }
    }
    Err(Error::Generation(format!(
        "no {} example of {c:?} found on {side}x{side} panels",
        if positive { "positive" } else { "negative" }
    )))
}

/// Positive and negative example panels for a hidden concept.
pub fn gen_bongard_puzzle(
    rule: &RuleDescriptor,
    seed: u64,
    n_positive: usize,
    n_negative: usize,
    cfg: &TaskConfig,
) -> Result<(Vec<Panel>, Vec<Panel>)> {
    expect(rule, &[Category::Crystallized, Category::Visuospatial], &[RuleKind::ConceptMembership])?;
    if n_positive == 0 || n_negative == 0 {
        return Err(Error::Generation(format!(
            "need at least one positive and one negative, got {n_positive} and {n_negative}"
        )));
    }
    let concept = rule.concept_kind()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = cfg.bongard_side;
    let pos = (0..n_positive)
        .map(|_| sample_member(&mut rng, concept, true, side, &cfg.space))
        .collect::<Result<Vec<_>>>()?;
    let neg = (0..n_negative)
        .map(|_| sample_member(&mut rng, concept, false, side, &cfg.space))
        .collect::<Result<Vec<_>>>()?;
    Ok((pos, neg))
}

/// Holds out one positive, mixes it into the negatives and shuffles.
pub fn reformat_bongard(rule: &RuleDescriptor, mut positives: Vec<Panel>, negatives: Vec<Panel>, seed: u64) -> Result<Puzzle> {
    if positives.len() < 2 || negatives.is_empty() {
        return Err(Error::arg(format!(
            "reformatting needs >= 2 positives and >= 1 negative, got {} and {}",
            positives.len(),
            negatives.len()
        )));
    }
    if negatives.len() + 1 > MAX_OPTIONS {
        return Err(Error::arg(format!("{} negatives exceed the option budget", negatives.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let held = positives.remove(rng.gen_range(0..positives.len()));
    let mut order: Vec<usize> = (0..=negatives.len()).collect();
    order.shuffle(&mut rng);
    let mut answer_index = 0;
    let options = order
        .iter()
        .enumerate()
        .map(|(slot, &src)| {
            if src == 0 {
                answer_index = slot;
                held.clone()
            } else {
                negatives[src - 1].clone()
            }
        })
        .collect();
    Ok(Puzzle { question_panels: positives, option_panels: options, answer_index, rule: rule.clone(), rationale: vec![] })
}

fn transform_input<R: Rng>(rng: &mut R, t: Transform, side: usize, space: &AttrSpace) -> Result<Panel> {
    for _ in 0..MAX_ATTEMPTS {
        let mut p = random_panel(rng, side, 2, space)?;
        let ok = match t {
            Transform::Identity => true,
            Transform::Recolor { from, .. } => {
                let present: Vec<usize> = (0..p.cells().len()).filter(|&i| p.cells()[i].present).collect();
                let n = rng.gen_range(1..=present.len());
            for &i in present.choose_multiple(rng, n) {
                    p.cells_mut()[i].color = from;
                }
                true
            }
            Transform::Grow => {
                for x in p.cells_mut().iter_mut().filter(|x| x.present) {
                    x.size = rng.gen_range(0..space.sizes - 1);
                }
                true
            }
            Transform::ReflectHorizontal => p.reflect_horizontal() != p,
            Transform::Rotate90 => p.rotate90() != p,
        };
        if ok {
            return Ok(p);
        }
    }
    Err(Error::Generation(format!("no informative input found for {t:?}")))
}

/// Example (input, output) pairs plus a new input; the answer is the
/// transformed new input, distractors come from `reformat_arc`.
pub fn gen_transform_puzzle(rule: &RuleDescriptor, seed: u64, cfg: &TaskConfig) -> Result<Puzzle> {
    expect(rule, &[Category::MentalSimulation], &[RuleKind::Transformation])?;
    cfg.validate()?;
    let t = rule.transform_kind()?;
    let space = &cfg.space;
    let side = cfg.transform_side;
    match t {
        Transform::Recolor { from, to } if from == to || from >= space.colors || to >= space.colors => {
            return Err(Error::Generation(format!("recolor {from}->{to} undefined for {} colors", space.colors)));
        }
        Transform::Grow if space.sizes < 2 => {
            return Err(Error::Generation("grow needs at least two sizes".into()));
        }
        Transform::ReflectHorizontal | Transform::Rotate90 if side < 2 => {
            return Err(Error::Generation(format!("{t:?} is invisible on 1x1 panels")));
        }
        _ => {}
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut question = Vec::with_capacity(2 * cfg.transform_pairs + 1);
    for _ in 0..cfg.transform_pairs {
        let x = transform_input(&mut rng, t, side, space)?;
        let y = apply_transform(t, &x, space.sizes)?;
        question.push(x);
        question.push(y);
    }
    let input = transform_input(&mut rng, t, side, space)?;
    let truth = apply_transform(t, &input, space.sizes)?;
    question.push(input);
    let (options, answer_index) = reformat_arc(&truth, rng.gen(), cfg.num_options - 1, space)?;
    Ok(Puzzle { question_panels: question, option_panels: options, answer_index, rule: rule.clone(), rationale: vec![] })
}

/// Options made of the ground truth plus perturbed copies (a global color
/// remap or a single toggled cell), shuffled.
pub fn reformat_arc(truth: &Panel, seed: u64, k_distractors: usize, space: &AttrSpace) -> Result<(Vec<Panel>, usize)> {
    if k_distractors == 0 {
        return Err(Error::arg("need at least one distractor"));
    }
    if k_distractors + 1 > MAX_OPTIONS {
        return Err(Error::arg(format!("{k_distractors} distractors exceed the option budget")));
    }
    if truth.count() == 0 {
        return Err(Error::arg("ground truth panel has no present cell"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut colors: Vec<u8> = truth.cells().iter().filter(|c| c.present).map(|c| c.color).collect();
    colors.sort_unstable();
    colors.dedup();
    let mut pool: Vec<Panel> = Vec::new();
    for &a in &colors {
        for b in (0..space.colors).filter(|&b| b != a) {
            let mut p = truth.clone();
            for c in p.cells_mut().iter_mut().filter(|c| c.present && c.color == a) {
                c.color = b;
            }
            pool.push(p);
        }
    }
    for i in 0..truth.cells().len() {
        let mut p = truth.clone();
        p.cells_mut()[i] = if p.cells()[i].present { Cell::EMPTY } else { Cell::random_object(&mut rng, space) };
        pool.push(p);
    }
    let mut distinct: Vec<Panel> = Vec::with_capacity(pool.len());
    for p in pool {
        if &p != truth && !distinct.contains(&p) {
            distinct.push(p);
        }
    }
    if distinct.len() < k_distractors {
        return Err(Error::Generation(format!(
            "only {} distinct perturbations available, {k_distractors} requested",
            distinct.len()
        )));
    }
    distinct.shuffle(&mut rng);
    distinct.truncate(k_distractors);
    let answer_index = rng.gen_range(0..=k_distractors);
    distinct.insert(answer_index, truth.clone());
    Ok((distinct, answer_index))
}

/// Whether some attribute other than `bound` also singles out one panel.
fn has_competing_oddity(panels: &[Panel], bound: Attribute) -> bool {
    Attribute::ALL.iter().filter(|&&a| a != bound && a != Attribute::Presence).any(|&a| {
        let vals: Vec<Option<u64>> = panels.iter().map(|p| p.value(a)).collect();
        (0..vals.len()).any(|i| {
            let mut others = vals.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| *v);
            let first = others.next().flatten();
            matches!((vals[i], first), (Some(x), Some(c)) if x != c && others.all(|v| v == Some(c)))
        })
    })
}

/// K panels, K-1 of which share the bound attribute value.
pub fn gen_odd_one_out(rule: &RuleDescriptor, seed: u64, cfg: &TaskConfig) -> Result<Puzzle> {
    expect(rule, &[Category::VisualRoutines], &[RuleKind::OddOneOut])?;
    let k = cfg.num_options;
    if k < 3 {
        return Err(Error::arg(format!("odd-one-out needs K >= 3, got {k}")));
    }
    cfg.validate()?;
    let attr = rule.attribute;
    let range = cfg.space.range(attr);
    if range < 2 {
        return Err(Error::Generation(format!("{} has a single value", attr.name())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let common = rng.gen_range(0..range);
    let deviant = (common + rng.gen_range(1..range)) % range;
    let answer_index = rng.gen_range(0..k);
    for _ in 0..MAX_ATTEMPTS {
        let panels = (0..k)
            .map(|i| {
                let v = if i == answer_index { deviant } else { common };
                realize(&mut rng, cfg.odd_side, attr, v as u64, &cfg.space)
            })
            .collect::<Result<Vec<_>>>()?;
        if !has_competing_oddity(&panels, attr) {
            return Ok(Puzzle {
                question_panels: vec![],
                option_panels: panels,
                answer_index,
                rule: rule.clone(),
                rationale: vec![],
            });
        }
    }
    Err(Error::Generation("could not avoid a competing odd attribute".into()))
}

/// Dispatches on category; pure in (rule, seed, cfg).
pub fn generate_puzzle(rule: &RuleDescriptor, seed: u64, cfg: &TaskConfig) -> Result<Puzzle> {
    match rule.category {
        Category::Fluid => gen_matrix_puzzle(rule, seed, cfg),
        Category::Crystallized | Category::Visuospatial => {
            let (pos, neg) = gen_bongard_puzzle(rule, seed, cfg.bongard_positives, cfg.num_options - 1, cfg)?;
            reformat_bongard(rule, pos, neg, seed.wrapping_add(0x9e37_79b9_7f4a_7c15))
        }
        Category::MentalSimulation => gen_transform_puzzle(rule, seed, cfg),
        Category::VisualRoutines => gen_odd_one_out(rule, seed, cfg),
    }
}
