//! Downstream evaluation: zero-shot retrieval with Recall@K, held-out
//! pretraining metrics, classifier fine-tuning, and the objective ablation.

mod ablation;
mod classify;
mod heldout;
mod retrieval;

pub use ablation::{
    run_ablation, AblationData, AblationReport, AblationRow, Verdict, FUSION_VQA, ITC_RETRIEVAL, TASK_TEST_STREAM,
    TASK_TRAIN_STREAM,
};
pub use classify::{
    accuracy, finetune_classifier, task_features, ClassifierHead, FinetuneOutcome, FinetuneReport, TaskData, TaskMode,
};
pub use heldout::{heldout_metrics, HeldOutReport};
pub use retrieval::{
    first_sentence, itc_embed_images, itc_embed_texts, recall_at_k, recall_curve, retrieval_corpus, retrieval_reports,
    zero_shot_retrieve, Direction, RetrievalMode, RetrievalReport,
};
