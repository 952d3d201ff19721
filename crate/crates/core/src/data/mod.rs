//! Records, templates, sampling rules and the synthetic generator.

mod image;
mod prepare;
mod record;
pub mod synth;
pub mod templates;

pub use image::Image;
pub use prepare::{prepare_example, truncate};
pub use record::{
    count_seg, load_jsonl, prompts_from_json, prompts_to_json, referenced_prompts, save_jsonl, ImageSource, SampleRecord, Task, Turn};
pub use synth::{
    generate_record, generate_synthetic_dataset, patch_mask, sample_referring, sample_visual_prompts, toy_referring_set, SynthConfig,
};
pub use templates::{build_instance_template, render_turn, Instance, NONEXISTENT_ANSWER};
