//! Per-document extract(+correct) runs over a bounded worker pool.

use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use crate::corpus::Document;
use crate::correction::{correct_facts, CorrectionOutcome, CorrectionPolicy};
use crate::extraction::{extract_document, ExtractionOutcome, PromptSpec};
use crate::gateway::{Gateway, GatewayError};
use crate::hrkg::HyperRelationalFact;

#[derive(Debug, Clone, PartialEq)]
pub struct StageSettings {
    pub max_attempts: u32,
    /// `None` disables the correction pass.
    pub correction: Option<CorrectionPolicy>,
    pub concurrency: usize,
}

impl Default for StageSettings {
    fn default() -> Self {
        Self {
            max_attempts: 2,
            correction: Some(CorrectionPolicy::default()),
            concurrency: 4,
        }
    }
}

impl StageSettings {
    /// Upper bound on chat calls for one document.
    pub fn max_calls_per_document(&self) -> u64 {
        u64::from(self.max_attempts.max(1)) + u64::from(self.correction.is_some())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DocOutcome {
    pub doc_id: String,
    pub extraction: ExtractionOutcome,
    pub correction: Option<CorrectionOutcome>,
    pub extract_ms: u64,
    pub correct_ms: u64,
}

impl DocOutcome {
    pub fn final_facts(&self) -> &[HyperRelationalFact] {
        match &self.correction {
            Some(c) => &c.facts,
            None => &self.extraction.facts,
        }
    }
}

pub fn process_document(
    gateway: &Gateway,
    doc: &Document,
    spec: &PromptSpec,
    settings: &StageSettings,
) -> Result<DocOutcome, GatewayError> {
    let started = Instant::now();
    let extraction = extract_document(gateway, doc, spec, settings.max_attempts)?;
    let extract_ms = started.elapsed().as_millis() as u64;
    let started = Instant::now();
    let correction = match &settings.correction {
        Some(policy) => Some(correct_facts(gateway, doc, &extraction.facts, policy)?),
        None => None,
    };
    Ok(DocOutcome {
        doc_id: doc.id.clone(),
        extraction,
        correction,
        extract_ms,
        correct_ms: started.elapsed().as_millis() as u64,
    })
}

/// Maps `f` over `items` with up to `workers` threads, returning results in
/// input order. After the first error no new items are started; the error
/// of the lowest-index failing item is returned.
pub fn parallel_try_map<T, R, E, F>(items: &[T], workers: usize, f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(&T) -> Result<R, E> + Sync,
{
    let workers = workers.clamp(1, items.len().max(1));
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let slots: Mutex<Vec<Option<Result<R, E>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if failed.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let result = f(&items[i]);
                if result.is_err() {
                    failed.store(true, Ordering::SeqCst);
                }
                slots.lock().unwrap_or_else(|p| p.into_inner())[i] = Some(result);
            });
        }
    });
    let slots = slots.into_inner().unwrap_or_else(|p| p.into_inner());
    let mut out = Vec::with_capacity(items.len());
    for slot in slots {
        match slot {
            Some(Ok(r)) => out.push(r),
            Some(Err(e)) => return Err(e),
            // skipped after another item failed; that error comes first or later
            None => continue,
        }
    }
    Ok(out)
}

/// Runs every document; outcomes come back in input order.
pub fn run_documents(
    gateway: &Gateway,
    docs: &[Document],
    spec: &PromptSpec,
    settings: &StageSettings,
) -> Result<Vec<DocOutcome>, GatewayError> {
    parallel_try_map(docs, settings.concurrency, |doc| process_document(gateway, doc, spec, settings))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_preserved() {
        let items: Vec<u32> = (0..50).collect();
        let out: Result<Vec<u32>, ()> = parallel_try_map(&items, 7, |x| Ok(x * 2));
        assert_eq!(out.unwrap(), items.iter().map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn first_error_wins() {
        let items: Vec<u32> = (0..20).collect();
        let out: Result<Vec<u32>, u32> = parallel_try_map(&items, 1, |x| if *x >= 5 { Err(*x) } else { Ok(*x) });
        assert_eq!(out, Err(5));
    }

    #[test]
    fn empty_input() {
        let out: Result<Vec<u32>, ()> = parallel_try_map(&[], 4, |x: &u32| Ok(*x));
        assert!(out.unwrap().is_empty());
    }
}
