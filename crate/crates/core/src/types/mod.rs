//! Dataset data model shared by every stage: vocabulary, masks, records and
//! the manifest files.

mod manifest;
mod mask;
mod record;
mod vocab;

pub use manifest::{read_records, Manifest, ManifestError, FORMAT_VERSION, MANIFEST_FILE, VOCABULARY_FILE};
pub use mask::{rle_decode, rle_encode, ClassMask, MaskError};
pub use record::{validate_sample, Provenance, SampleRecord, Violation, MAX_CATEGORIES};
pub use vocab::{normalize_name, CategoryId, Vocabulary, VocabularyError};
