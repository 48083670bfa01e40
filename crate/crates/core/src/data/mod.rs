//! Synthetic forensics corpus: procedural scenes, two families of local
//! edits, exact changed-pixel masks and templated edit instructions.

mod corpus;
mod edit;
mod scene;

pub use corpus::{
    build_corpus, generate_corpus, generate_sample, samples_digest, write_corpus, Corpus, CorpusConfig,
    CorpusDir, CorpusManifest, SampleRecord, SEEN_TEST, TRAIN, UNSEEN_TEST,
};
pub use edit::{
    apply_edit, changed_pixels, close3x3, render_instruction, sample_edit, EditOp, EditSpec, EditedSample,
    Family, BACKGROUND, CHANGE_TOLERANCE, MAX_MASK_FRACTION, VERBS,
};
pub use scene::{
    class_color, class_shape, generate_scene, render_scene, BBox, Background, SceneObject, SceneSpec, Shape,
    COLOR_NAMES, NOUNS, OUTLINE_SHADE, SOURCE_NOISE,
};
