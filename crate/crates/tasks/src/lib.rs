pub mod mqar;
pub mod text;

pub use mqar::{
    cached_split, evaluate_mqar, generate_mqar, mqar_batch, mqar_example, MqarConfig, MqarExample, Split,
};
pub use text::{
    evaluate_perplexity, extrapolation_csv, length_extrapolation_eval, load_text_corpus, synthetic_corpus,
    text_batch, tokenize, ExtrapolationRow, TextCorpus, BYTE_VOCAB,
};
