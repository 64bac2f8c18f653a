use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::RwLock;
use uuid::Uuid;

use crate::session::Session;

struct Entry {
    session: Arc<Session>,
    last_used: AtomicU64,
}

/// Live sessions, evicted least-recently-used beyond `capacity`.
pub struct SessionStore {
    entries: RwLock<HashMap<Uuid, Entry>>,
    capacity: usize,
    clock: AtomicU64,
}

impl SessionStore {
    pub fn new(capacity: usize) -> Self {
        Self {
            entries: RwLock::new(HashMap::new()),
            capacity: capacity.max(1),
            clock: AtomicU64::new(0),
        }
    }

    fn tick(&self) -> u64 {
        self.clock.fetch_add(1, Ordering::Relaxed)
    }

    /// Adds a session; returns the ids evicted to make room.
    pub fn insert(&self, session: Session) -> (Arc<Session>, Vec<Uuid>) {
        let session = Arc::new(session);
        let mut entries = self.entries.write();
        let mut evicted = Vec::new();
        while entries.len() >= self.capacity {
            let oldest = entries
                .iter()
                .min_by_key(|(_, e)| e.last_used.load(Ordering::Relaxed))
                .map(|(id, _)| *id);
            match oldest {
                Some(id) => {
                    entries.remove(&id);
                    evicted.push(id);
                }
                None => break,
            }
        }
        entries.insert(
            session.id,
            Entry {
                session: session.clone(),
                last_used: AtomicU64::new(self.tick()),
            },
        );
        (session, evicted)
    }

    pub fn get(&self, id: &Uuid) -> Option<Arc<Session>> {
        let entries = self.entries.read();
        let e = entries.get(id)?;
        e.last_used.store(self.tick(), Ordering::Relaxed);
        Some(e.session.clone())
    }

    pub fn remove(&self, id: &Uuid) -> bool {
        self.entries.write().remove(id).is_some()
    }

    pub fn len(&self) -> usize {
        self.entries.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
