use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use lru::LruCache;
use temporal_mpi::mpi::MpiVolume;
use temporal_mpi::temporal_field::BakedCoefficients;
use tokio::sync::OnceCell;

pub const DEFAULT_CACHE_SIZE: usize = 8;

type Slot = Arc<OnceCell<Arc<MpiVolume>>>;

/// Immutable scene plus a bounded cache of baked time instances.
///
/// Concurrent first requests for the same timestamp share one cache slot,
/// so each bake happens once.
pub struct ServeState {
    pub baked: BakedCoefficients,
    cache: Mutex<LruCache<usize, Slot>>,
    bakes: AtomicUsize,
}

impl ServeState {
    pub fn new(baked: BakedCoefficients, cache_size: usize) -> Self {
        let cap = NonZeroUsize::new(cache_size.max(1)).expect("nonzero");
        Self {
            baked,
            cache: Mutex::new(LruCache::new(cap)),
            bakes: AtomicUsize::new(0),
        }
    }

    pub fn timestamps(&self) -> usize {
        self.baked.header.timestamps
    }

    /// Number of bakes performed so far.
    pub fn bake_count(&self) -> usize {
        self.bakes.load(Ordering::Relaxed)
    }

    /// The time instance at 1-based `t`, baked on first use.
    pub async fn volume(self: &Arc<Self>, t: usize) -> temporal_mpi::Result<Arc<MpiVolume>> {
        let slot = {
            let mut cache = self.cache.lock().expect("cache lock poisoned");
            cache.get_or_insert(t, || Arc::new(OnceCell::new())).clone()
        };
        let vol = slot
            .get_or_try_init(|| {
                let state = Arc::clone(self);
                async move {
                    tokio::task::spawn_blocking(move || {
                        state.bakes.fetch_add(1, Ordering::Relaxed);
                        state.baked.bake_time_instance(t).map(Arc::new)
                    })
                    .await
                    .expect("bake task panicked")
                }
            })
            .await?;
        Ok(Arc::clone(vol))
    }
}
