use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use crossbeam_channel::{unbounded, Sender};

type Job = Box<dyn FnOnce() + Send>;

/// Fixed set of worker threads, one per slot.
pub struct SlotPool {
    tx: Option<Sender<Job>>,
    slots: usize,
    busy: Arc<AtomicUsize>,
}

impl SlotPool {
    pub fn new(name: &str, slots: usize) -> Self {
        let slots = slots.max(1);
        let (tx, rx) = unbounded::<Job>();
        let busy = Arc::new(AtomicUsize::new(0));
        for i in 0..slots {
            let rx = rx.clone();
            let busy = busy.clone();
            thread::Builder::new()
                .name(format!("{name}-slot{i}"))
                .spawn(move || {
                    while let Ok(job) = rx.recv() {
                        busy.fetch_add(1, Ordering::SeqCst);
                        job();
                        busy.fetch_sub(1, Ordering::SeqCst);
                    }
                })
                .expect("spawn worker");
        }
        Self {
            tx: Some(tx),
            slots,
            busy,
        }
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn busy(&self) -> usize {
        self.busy.load(Ordering::SeqCst)
    }

    pub fn execute(&self, job: impl FnOnce() + Send + 'static) {
        if let Some(tx) = &self.tx {
            let _ = tx.send(Box::new(job));
        }
    }
}

impl Drop for SlotPool {
    fn drop(&mut self) {
        // Workers exit once the queue drains.
        self.tx.take();
    }
}
