//! K-resident asset store with per-asset share caps and background loading.
//!
//! At most `capacity` assets are resident at once and at most `share_cap`
//! environments may reference any one of them. `rotate` tells the store which
//! scenes come next; a loader thread reads them off the critical path and
//! stages them until an episode boundary admits them, evicting an
//! unreferenced resident if the store is full.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};

use super::{load_scene, SceneAsset, SceneError, SceneId};

pub const DEFAULT_SHARE_CAP: usize = 32;

/// Where the store gets assets from.
pub trait SceneSource: Send + Sync {
    fn load(&self, id: SceneId) -> Result<SceneAsset, SceneError>;
}

/// Scenes held in memory (already generated or decoded). Loads hand out copies.
pub struct GeneratedSource {
    assets: HashMap<SceneId, Arc<SceneAsset>>,
}

impl GeneratedSource {
    pub fn new(assets: impl IntoIterator<Item = SceneAsset>) -> Self {
        Self {
            assets: assets.into_iter().map(|a| (a.id(), Arc::new(a))).collect(),
        }
    }

    pub fn ids(&self) -> Vec<SceneId> {
        let mut ids: Vec<_> = self.assets.keys().copied().collect();
        ids.sort();
        ids
    }
}

impl SceneSource for GeneratedSource {
    fn load(&self, id: SceneId) -> Result<SceneAsset, SceneError> {
        self.assets
            .get(&id)
            .map(|a| SceneAsset::clone(a))
            .ok_or(SceneError::UnknownScene(id))
    }
}

/// Scene container files on disk, indexed by content hash.
pub struct DirectorySource {
    paths: HashMap<SceneId, PathBuf>,
}

impl DirectorySource {
    pub fn new(entries: impl IntoIterator<Item = (SceneId, PathBuf)>) -> Self {
        Self {
            paths: entries.into_iter().collect(),
        }
    }
}

impl SceneSource for DirectorySource {
    fn load(&self, id: SceneId) -> Result<SceneAsset, SceneError> {
        let path = self.paths.get(&id).ok_or(SceneError::UnknownScene(id))?;
        let asset = load_scene(path)?;
        if asset.id() != id {
            return Err(SceneError::Corrupt {
                stored: id,
                computed: asset.id(),
            });
        }
        Ok(asset)
    }
}

/// Lookup of resident assets by id, used by the renderer.
pub trait AssetResolver {
    fn resolve(&self, id: SceneId) -> Option<Arc<SceneAsset>>;
}

impl AssetResolver for HashMap<SceneId, Arc<SceneAsset>> {
    fn resolve(&self, id: SceneId) -> Option<Arc<SceneAsset>> {
        self.get(&id).cloned()
    }
}

struct Resident {
    asset: Arc<SceneAsset>,
    refcount: usize,
    admitted_at: u64,
    released_at: u64,
}

#[derive(Default)]
struct State {
    residents: BTreeMap<SceneId, Resident>,
    staged: Vec<(SceneId, Arc<SceneAsset>)>,
    in_flight: BTreeSet<SceneId>,
    upcoming: Vec<SceneId>,
    failures: Vec<(SceneId, String)>,
    tick: u64,
}

type Completion = (SceneId, Result<SceneAsset, SceneError>);

struct Shared {
    state: Mutex<State>,
    capacity: usize,
    share_cap: usize,
    deterministic: bool,
    source: Arc<dyn SceneSource>,
    requests: Mutex<Option<Sender<SceneId>>>,
    completions: Mutex<Receiver<Completion>>,
    loader: Mutex<Option<JoinHandle<()>>>,
}

/// Reference to a resident asset. Dropping the handle releases it.
pub struct AssetHandle {
    id: SceneId,
    asset: Arc<SceneAsset>,
    shared: Arc<Shared>,
}

impl AssetHandle {
    pub fn id(&self) -> SceneId {
        self.id
    }

    pub fn asset(&self) -> &Arc<SceneAsset> {
        &self.asset
    }
}

impl std::fmt::Debug for AssetHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AssetHandle").field("id", &self.id).finish()
    }
}

impl Drop for AssetHandle {
    fn drop(&mut self) {
        let mut st = lock(&self.shared.state);
        st.tick += 1;
        let tick = st.tick;
        if let Some(r) = st.residents.get_mut(&self.id) {
            r.refcount -= 1;
            if r.refcount == 0 {
                r.released_at = tick;
            }
        }
    }
}

/// Residency and reference counts at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreSnapshot {
    pub residents: Vec<(SceneId, usize)>,
    pub staged: Vec<SceneId>,
    pub in_flight: Vec<SceneId>,
}

/// Everything needed to rebuild a store's assignment behaviour, apart from
/// reference counts (which come back as environments re-acquire).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreState {
    pub tick: u64,
    /// `(scene, admitted_at, released_at)`
    pub residents: Vec<(SceneId, u64, u64)>,
    pub staged: Vec<SceneId>,
    pub upcoming: Vec<SceneId>,
}

#[derive(Clone)]
pub struct AssetStore {
    shared: Arc<Shared>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl AssetStore {
    /// Create a store that admits background loads whenever they complete.
    pub fn new(capacity: usize, share_cap: usize, source: Arc<dyn SceneSource>) -> Self {
        Self::build(capacity, share_cap, source, false)
    }

    /// Create a store whose background loads become visible only at
    /// [`AssetStore::sync`], making asset assignment independent of loader
    /// timing.
    pub fn deterministic(capacity: usize, share_cap: usize, source: Arc<dyn SceneSource>) -> Self {
        Self::build(capacity, share_cap, source, true)
    }

    fn build(capacity: usize, share_cap: usize, source: Arc<dyn SceneSource>, deterministic: bool) -> Self {
        assert!(
            capacity > 0 && share_cap > 0,
            "store capacity and share cap must be positive"
        );
        let (req_tx, req_rx) = channel::<SceneId>();
        let (done_tx, done_rx) = channel::<Completion>();
        let loader_source = Arc::clone(&source);
        let loader = std::thread::Builder::new()
            .name("scene-loader".into())
            .spawn(move || {
                for id in req_rx {
                    let result = loader_source.load(id);
                    if done_tx.send((id, result)).is_err() {
                        break;
                    }
                }
            })
            .expect("spawn scene loader");
        Self {
            shared: Arc::new(Shared {
                state: Mutex::new(State::default()),
                capacity,
                share_cap,
                deterministic,
                source,
                requests: Mutex::new(Some(req_tx)),
                completions: Mutex::new(done_rx),
                loader: Mutex::new(Some(loader)),
            }),
        }
    }

    pub fn capacity(&self) -> usize {
        self.shared.capacity
    }

    pub fn share_cap(&self) -> usize {
        self.shared.share_cap
    }

    fn drain(&self, st: &mut State, block: bool) {
        let rx = lock(&self.shared.completions);
        loop {
            let msg = if block {
                if st.in_flight.is_empty() {
                    break;
                }
                match rx.recv() {
                    Ok(m) => m,
                    Err(_) => break,
                }
            } else {
                match rx.try_recv() {
                    Ok(m) => m,
                    Err(_) => break,
                }
            };
            let (id, result) = msg;
            st.in_flight.remove(&id);
            match result {
                Ok(asset) => {
                    if !st.residents.contains_key(&id) && !st.staged.iter().any(|(s, _)| *s == id) {
                        st.staged.push((id, Arc::new(asset)));
                    }
                }
                Err(e) => st.failures.push((id, e.to_string())),
            }
        }
    }

    fn poll(&self, st: &mut State) {
        if !self.shared.deterministic {
            self.drain(st, false);
        }
    }

    /// Block until every requested background load has completed.
    pub fn sync(&self) {
        let mut st = lock(&self.shared.state);
        self.drain(&mut st, true);
    }

    /// Make room for and admit `asset`; fails if the store is full of
    /// referenced residents.
    fn admit(&self, st: &mut State, id: SceneId, asset: Arc<SceneAsset>) -> Result<(), Arc<SceneAsset>> {
        if st.residents.len() >= self.shared.capacity {
            let victim = st
                .residents
                .iter()
                .filter(|(_, r)| r.refcount == 0)
                .min_by_key(|(rid, r)| (r.released_at, **rid))
                .map(|(rid, _)| *rid);
            match victim {
                Some(v) => {
                    st.residents.remove(&v);
                }
                None => return Err(asset),
            }
        }
        st.tick += 1;
        let tick = st.tick;
        st.residents.insert(
            id,
            Resident {
                asset,
                refcount: 0,
                admitted_at: tick,
                released_at: tick,
            },
        );
        Ok(())
    }

    fn take_ref(&self, st: &mut State, id: SceneId) -> AssetHandle {
        let r = st.residents.get_mut(&id).expect("resident");
        r.refcount += 1;
        debug_assert!(r.refcount <= self.shared.share_cap);
        AssetHandle {
            id,
            asset: Arc::clone(&r.asset),
            shared: Arc::clone(&self.shared),
        }
    }

    /// Reference scene `id`, loading it synchronously if it is neither
    /// resident nor staged.
    pub fn acquire(&self, id: SceneId) -> Result<AssetHandle, SceneError> {
        let mut st = lock(&self.shared.state);
        self.poll(&mut st);
        if let Some(r) = st.residents.get(&id) {
            if r.refcount >= self.shared.share_cap {
                return Err(SceneError::Saturated(format!(
                    "scene {id} already referenced by {} environments",
                    r.refcount
                )));
            }
            return Ok(self.take_ref(&mut st, id));
        }
        if st.residents.len() >= self.shared.capacity && st.residents.values().all(|r| r.refcount > 0) {
            return Err(SceneError::Saturated(format!(
                "all {} resident scenes are referenced; cannot admit {id}",
                st.residents.len()
            )));
        }
        let asset = match st.staged.iter().position(|(s, _)| *s == id) {
            Some(i) => st.staged.remove(i).1,
            None => Arc::new(self.shared.source.load(id)?),
        };
        if let Err(asset) = self.admit(&mut st, id, asset) {
            st.staged.push((id, asset));
            return Err(SceneError::Saturated(format!("no evictable resident for {id}")));
        }
        Ok(self.take_ref(&mut st, id))
    }

    /// Reference the asset an environment should use for its next episode:
    /// a freshly loaded asset if one can be admitted, otherwise the most
    /// recently admitted resident below the share cap.
    pub fn acquire_next(&self) -> Result<AssetHandle, SceneError> {
        let mut st = lock(&self.shared.state);
        self.poll(&mut st);
        if !st.staged.is_empty() {
            let (id, asset) = st.staged.remove(0);
            match self.admit(&mut st, id, asset) {
                Ok(()) => return Ok(self.take_ref(&mut st, id)),
                Err(asset) => st.staged.insert(0, (id, asset)),
            }
        }
        let pick = st
            .residents
            .iter()
            .filter(|(_, r)| r.refcount < self.shared.share_cap)
            .max_by_key(|(rid, r)| (r.admitted_at, std::cmp::Reverse(**rid)))
            .map(|(rid, _)| *rid);
        if let Some(id) = pick {
            return Ok(self.take_ref(&mut st, id));
        }
        if st.residents.len() < self.shared.capacity {
            let cold = st.upcoming.iter().copied().find(|id| !st.residents.contains_key(id));
            if let Some(id) = cold {
                drop(st);
                return self.acquire(id);
            }
        }
        Err(SceneError::Saturated(format!(
            "all {} resident scenes are at the share cap of {}",
            st.residents.len(),
            self.shared.share_cap
        )))
    }

    /// Explicit release; equivalent to dropping the handle.
    pub fn release(&self, handle: AssetHandle) {
        drop(handle);
    }

    /// Announce the upcoming scenes: evict unreferenced residents that are
    /// not among them and start background loads for the ones not yet
    /// available.
    pub fn rotate(&self, next_scene_ids: &[SceneId]) {
        let mut st = lock(&self.shared.state);
        self.poll(&mut st);
        st.upcoming = next_scene_ids.to_vec();
        let keep: BTreeSet<SceneId> = next_scene_ids.iter().copied().collect();
        st.residents.retain(|id, r| r.refcount > 0 || keep.contains(id));
        st.staged.retain(|(id, _)| keep.contains(id));
        let tx = lock(&self.shared.requests);
        let Some(tx) = tx.as_ref() else { return };
        for &id in next_scene_ids {
            if st.staged.len() + st.in_flight.len() >= self.shared.capacity {
                break;
            }
            if st.residents.contains_key(&id) || st.in_flight.contains(&id) || st.staged.iter().any(|(s, _)| *s == id) {
                continue;
            }
            if tx.send(id).is_ok() {
                st.in_flight.insert(id);
            }
        }
    }

    pub fn snapshot(&self) -> StoreSnapshot {
        let st = lock(&self.shared.state);
        StoreSnapshot {
            residents: st.residents.iter().map(|(id, r)| (*id, r.refcount)).collect(),
            staged: st.staged.iter().map(|(id, _)| *id).collect(),
            in_flight: st.in_flight.iter().copied().collect(),
        }
    }

    /// Completes pending loads, then captures the store's state.
    pub fn export_state(&self) -> StoreState {
        let mut st = lock(&self.shared.state);
        self.drain(&mut st, true);
        StoreState {
            tick: st.tick,
            residents: st
                .residents
                .iter()
                .map(|(id, r)| (*id, r.admitted_at, r.released_at))
                .collect(),
            staged: st.staged.iter().map(|(id, _)| *id).collect(),
            upcoming: st.upcoming.clone(),
        }
    }

    /// Rebuilds a state captured by [`AssetStore::export_state`] on a store
    /// with no residents, loading the assets synchronously.
    pub fn import_state(&self, state: &StoreState) -> Result<(), SceneError> {
        let mut st = lock(&self.shared.state);
        if !st.residents.is_empty() || !st.staged.is_empty() || !st.in_flight.is_empty() {
            return Err(SceneError::Saturated(
                "store state can only be imported into an empty store".into(),
            ));
        }
        if state.residents.len() > self.shared.capacity {
            return Err(SceneError::Saturated(format!(
                "{} residents exceed the capacity of {}",
                state.residents.len(),
                self.shared.capacity
            )));
        }
        for &(id, admitted_at, released_at) in &state.residents {
            let asset = Arc::new(self.shared.source.load(id)?);
            st.residents.insert(
                id,
                Resident {
                    asset,
                    refcount: 0,
                    admitted_at,
                    released_at,
                },
            );
        }
        for &id in &state.staged {
            let asset = Arc::new(self.shared.source.load(id)?);
            st.staged.push((id, asset));
        }
        st.upcoming = state.upcoming.clone();
        st.tick = state.tick;
        Ok(())
    }

    pub fn resident_count(&self) -> usize {
        lock(&self.shared.state).residents.len()
    }

    /// Background load failures since the last call.
    pub fn take_failures(&self) -> Vec<(SceneId, String)> {
        std::mem::take(&mut lock(&self.shared.state).failures)
    }
}

impl AssetResolver for AssetStore {
    fn resolve(&self, id: SceneId) -> Option<Arc<SceneAsset>> {
        lock(&self.shared.state)
            .residents
            .get(&id)
            .map(|r| Arc::clone(&r.asset))
    }
}

impl Drop for Shared {
    fn drop(&mut self) {
        lock(&self.requests).take();
        if let Some(h) = lock(&self.loader).take() {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, GeneratorSpec};

    fn source(n: u64) -> (Arc<GeneratedSource>, Vec<SceneId>) {
        let spec = GeneratorSpec {
            cells_x: 2,
            cells_z: 2,
            ..GeneratorSpec::default()
        };
        let assets: Vec<_> = (0..n).map(|s| generate_scene(s, &spec).unwrap()).collect();
        let ids = assets.iter().map(|a| a.id()).collect();
        (Arc::new(GeneratedSource::new(assets)), ids)
    }

    #[test]
    fn saturation_when_all_residents_at_cap() {
        let (src, ids) = source(5);
        let store = AssetStore::new(4, 32, src);
        let mut handles = Vec::new();
        for id in &ids[..4] {
            for _ in 0..32 {
                handles.push(store.acquire(*id).unwrap());
            }
        }
        assert!(matches!(store.acquire(ids[4]), Err(SceneError::Saturated(_))));
        assert!(matches!(store.acquire(ids[0]), Err(SceneError::Saturated(_))));
        assert!(matches!(store.acquire_next(), Err(SceneError::Saturated(_))));
        assert_eq!(store.resident_count(), 4);
    }

    #[test]
    fn release_then_rotate_evicts() {
        let (src, ids) = source(3);
        let store = AssetStore::new(2, 32, src);
        let a = store.acquire(ids[0]).unwrap();
        let b = store.acquire(ids[1]).unwrap();
        store.release(a);
        store.rotate(&ids[1..]);
        let snap = store.snapshot();
        assert_eq!(snap.residents, vec![(ids[1], 1)]);
        store.sync();
        // the staged replacement is admitted at the next episode boundary
        let c = store.acquire_next().unwrap();
        assert_eq!(c.id(), ids[2]);
        assert!(store.resident_count() <= 2);
        drop((b, c));
    }

    #[test]
    fn full_store_evicts_unreferenced_before_admitting() {
        let (src, ids) = source(3);
        let store = AssetStore::deterministic(2, 4, src);
        let a = store.acquire(ids[0]).unwrap();
        let b = store.acquire(ids[1]).unwrap();
        drop(a);
        let c = store.acquire(ids[2]).unwrap();
        let snap = store.snapshot();
        assert_eq!(snap.residents.len(), 2);
        assert!(snap.residents.iter().all(|(id, _)| *id != ids[0]));
        drop((b, c));
    }
}
