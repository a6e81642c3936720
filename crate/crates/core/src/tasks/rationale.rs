use super::panel::Attribute;
use super::puzzle::Puzzle;
use super::rule::{Concept, RuleKind, Transform};
use super::vocab::Token;
use crate::error::{Error, Result};

pub const MIN_STEPS: usize = 3;
pub const MAX_STEPS: usize = 12;

fn number(v: u64) -> Vec<Token> {
    v.to_string().bytes().map(|b| Token::digit((b - b'0') as u64).expect("decimal digit")).collect()
}

fn mask_bits(mask: u64, cells: usize) -> Vec<Token> {
    (0..cells).map(|i| Token::digit(mask >> i & 1).expect("bit")).collect()
}

/// What a rationale reports about one option: its value of the bound
/// attribute, or for concept and transform rules whether it satisfies the
/// rule (`D1` / `D0`).
fn observe(p: &Puzzle, i: usize) -> Result<Vec<Token>> {
    let r = &p.rule;
    let panel = &p.option_panels[i];
    match r.rule_kind {
        RuleKind::ConceptMembership | RuleKind::Transformation => {
            Ok(vec![Token::digit(u64::from(p.option_satisfies(i)?))?])
        }
        _ if r.attribute == Attribute::Presence => Ok(mask_bits(panel.mask(), panel.cells().len())),
        _ => match panel.value(r.attribute) {
            Some(v) => Ok(number(v)),
            None => Ok(vec![Token::digit(u64::from(p.option_satisfies(i)?))?]),
        },
    }
}

/// Templated step-by-step rationale built from the ground-truth rule:
/// rule name, bound attribute, derived target, one observation per option,
/// picked option.
pub fn synthesize_rationale(p: &Puzzle) -> Result<Vec<Token>> {
    p.validate()?;
    let r = &p.rule;
    let mut steps: Vec<Vec<Token>> = vec![vec![Token::rule(r.rule_kind)], vec![Token::attribute(r.attribute)]];
    let answer = p.answer_panel();
    match r.rule_kind {
        RuleKind::Progression => {
            let s = r.step()?;
            let dir = if s > 0 { Token::PLUS } else { Token::MINUS };
            let mut step = vec![dir];
            step.extend(number(s.unsigned_abs()));
            steps.push(step);
            let v = answer.value(r.attribute).ok_or_else(|| Error::arg("answer panel has no defined value"))?;
            steps.push([vec![Token::TARGET], number(v)].concat());
        }
        RuleKind::Constancy => {
            let v = answer.value(r.attribute).ok_or_else(|| Error::arg("answer panel has no defined value"))?;
            steps.push([vec![Token::TARGET], number(v)].concat());
        }
        RuleKind::Xor => {
            let bits = mask_bits(answer.mask(), answer.cells().len());
            steps.push([vec![Token::TARGET], bits].concat());
        }
        RuleKind::ConceptMembership => steps.push(match r.concept_kind()? {
            Concept::Monochrome | Concept::SameShape => vec![Token::SAME],
            Concept::ContainsColor(c) => [vec![Token::CONTAINS], number(c as u64)].concat(),
            Concept::CountAtLeast(k) => [vec![Token::ATLEAST], number(k as u64)].concat(),
            Concept::MirrorSymmetric => vec![Token::SYMMETRIC],
            Concept::FullRow => vec![Token::FULL],
        }),
        RuleKind::Transformation => steps.push(match r.transform_kind()? {
            Transform::Identity => vec![Token::IDENTITY],
            Transform::Recolor { from, to } => [vec![Token::MAP], number(from as u64), number(to as u64)].concat(),
            Transform::ReflectHorizontal => vec![Token::REFLECT],
            Transform::Grow => vec![Token::GROW],
            Transform::Rotate90 => vec![Token::ROTATE],
        }),
        RuleKind::OddOneOut => {
            let other = (0..p.num_options()).find(|&i| i != p.answer_index).unwrap_or(0);
            let v = p.option_panels[other]
                .value(r.attribute)
                .ok_or_else(|| Error::arg("option panels share no common value"))?;
            steps.push([vec![Token::COMMON], number(v)].concat());
        }
    }
    for i in 0..p.num_options() {
        steps.push([vec![Token::option(i)?], observe(p, i)?].concat());
    }
    steps.push(vec![Token::PICK, Token::option(p.answer_index)?]);
    Ok(join(&steps))
}

fn join(steps: &[Vec<Token>]) -> Vec<Token> {
    let mut out = Vec::new();
    for (i, s) in steps.iter().enumerate() {
        if i > 0 {
            out.push(Token::SEP);
        }
        out.extend_from_slice(s);
    }
    out
}

/// Splits a rationale into SEP-delimited steps.
pub fn split_steps(z: &[Token]) -> Vec<&[Token]> {
    z.split(|&t| t == Token::SEP).collect()
}

/// Option index named by the final `PICK OPT_x` step, if present.
pub fn predicted_option(z: &[Token]) -> Option<usize> {
    match split_steps(z).last()? {
        [Token::PICK, o] => o.as_option(),
        _ => None,
    }
}

/// Structural validity: known tokens only, no termination marker inside,
/// step count within budget, a rule step, an attribute step, body steps that
/// name at most one option and only as their first token, a final pick.
pub fn is_well_formed(z: &[Token]) -> bool {
    if z.iter().any(|t| !t.is_valid() || *t == Token::END || *t == Token::QUERY) {
        return false;
    }
    let steps = split_steps(z);
    if !(MIN_STEPS..=MAX_STEPS).contains(&steps.len()) || steps.iter().any(|s| s.is_empty()) {
        return false;
    }
    let rule_ok = matches!(steps[0], [t] if t.is_rule());
    let attr_ok = matches!(steps[1], [t] if t.is_attribute());
    let plain = |t: &Token| !t.is_rule() && !t.is_attribute() && *t != Token::PICK && t.as_option().is_none();
    let body_ok = steps[2..steps.len() - 1].iter().all(|s| match s.split_first() {
        Some((first, rest)) if first.as_option().is_some() => !rest.is_empty() && rest.iter().all(plain),
        _ => s.iter().all(plain),
    });
    rule_ok && attr_ok && body_ok && predicted_option(z).is_some()
}

/// Keeps a chain only when it reaches the gold answer and is well formed.
pub fn filter_chain(z: &[Token], predicted: usize, gold: usize) -> bool {
    predicted == gold && is_well_formed(z)
}

/// Names the attribute a well-formed rationale binds.
pub fn bound_attribute(z: &[Token]) -> Option<Attribute> {
    let steps = split_steps(z);
    let t = *steps.get(1)?.first()?;
    Attribute::ALL.into_iter().find(|&a| Token::attribute(a) == t)
}

/// Stage-I pass over generator output: synthesize, filter, attach.
/// Returns `None` when the chain is rejected.
pub fn attach_rationale(mut p: Puzzle) -> Result<Option<Puzzle>> {
    let z = synthesize_rationale(&p)?;
    let predicted = predicted_option(&z);
    match predicted {
        Some(pred) if filter_chain(&z, pred, p.answer_index) => {
            p.rationale = z;
            Ok(Some(p))
        }
        _ => Ok(None),
    }
}
