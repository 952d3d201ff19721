use std::cmp::Ordering;

use crate::backbone::vocab::SEG_TEXT;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Fixed reply to a question about a prompt that is not attached.
pub const NONEXISTENT_ANSWER: &str = "This visual prompt does not exist.";

pub fn instance_question(class_name: &str) -> String {
    format!("Please segment the {class_name} in instance mode.")
}

pub fn semantic_question(class_name: &str) -> String {
    format!("Please segment the {class_name} in semantic mode.")
}

/// One turn in the quoted single-line form.
pub fn render_turn(question: &str, answer: &str) -> String {
    format!("Question: {question} Answer: {answer}")
}

/// An instance mask with its centre in `(x, y)` pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub mask: BinaryMask,
    pub center: (f64, f64),
}

impl Instance {
    /// Uses the mask centroid as the centre.
    pub fn from_mask(mask: BinaryMask) -> Result<Self> {
        let center = mask.center().ok_or_else(|| Error::data("instance mask is empty"))?;
        Ok(Self { mask, center })
    }
}

/// Left-to-right order: centre x, then centre y, then input position.
pub fn instance_order(centers: &[(f64, f64)]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..centers.len()).collect();
    idx.sort_by(|&a, &b| {
        let (ca, cb) = (centers[a], centers[b]);
        ca.0.total_cmp(&cb.0)
            .then(ca.1.total_cmp(&cb.1))
            .then(a.cmp(&b))
    });
    idx
}

/// Question, answer and masks in answer order for the instance template.
pub fn build_instance_template(class_name: &str, instances: &[Instance]) -> Result<(String, String, Vec<BinaryMask>)> {
    if instances.is_empty() {
        return Err(Error::data(format!("no instances of {class_name:?} to enumerate")));
    }
    let order = instance_order(&instances.iter().map(|i| i.center).collect::<Vec<_>>());
    let answer = (1..=order.len())
        .map(|k| format!("{class_name}-{k} {SEG_TEXT}"))
        .collect::<Vec<_>>()
        .join(", ");
    let masks = order.iter().map(|&i| instances[i].mask.clone()).collect();
    Ok((instance_question(class_name), answer, masks))
}

/// Semantic mode: one `[SEG]` for the union of all instances.
pub fn build_semantic_template(class_name: &str, instances: &[Instance]) -> Result<(String, String, BinaryMask)> {
    let first = instances
        .first()
        .ok_or_else(|| Error::data(format!("no instances of {class_name:?} to merge")))?;
    let mut union = first.mask.clone();
    for i in &instances[1..] {
        union = union.union_with(&i.mask)?;
    }
    Ok((semantic_question(class_name), format!("{class_name} {SEG_TEXT}"), union))
}

pub fn referring_question(expression: &str) -> String {
    format!("Please segment {expression}.")
}

pub const REFERRING_ANSWER: &str = "It is [SEG].";

pub fn caption_question(index: usize) -> String {
    format!("Please describe <VP_{index}> in detail.")
}

pub fn mcq_question(index: usize, options: &[String; 4]) -> String {
    format!(
        "What color is <VP_{index}>? A. {} B. {} C. {} D. {} Answer with the letter.",
        options[0], options[1], options[2], options[3]
    )
}

pub fn mcq_answer(letter: char) -> String {
    format!("The answer is {letter}.")
}

/// Total order check used by tests: `a` does not come after `b`.
pub fn precedes(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)) != Ordering::Greater
}
