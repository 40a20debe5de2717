//! Runtime dispatch over residue variants. A dispatch consumes the runtime
//! extent of the symbolic axis, picks the variant for `extent % tile` when
//! one was generated, and otherwise runs the guarded fallback. Externally
//! registered kernels take over a residue when their recorded cost beats the
//! measured cost of the built-in choice.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::error::CodegenError;

use super::kernel::{alloc_buffers, run_kernel, ExecStats, KernelBuf, KernelIR};
use super::tile::DispatchTable;

pub type NativeKernel = Arc<dyn Fn(&mut [KernelBuf]) -> Result<(), CodegenError> + Send + Sync>;

struct External {
    name: String,
    cost: u64,
    run: NativeKernel,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Selected {
    Variant(u32),
    Fallback,
    External(String),
}

pub struct Dispatch {
    pub table: DispatchTable,
    /// Cost of the built-in choice per residue, measured on a probe extent.
    internal_cost: BTreeMap<u32, u64>,
    externals: BTreeMap<u32, External>,
}

/// Probes every residue once on a small extent and freezes the measured
/// costs; external kernels registered later compete against these numbers.
pub fn build_dispatch(table: DispatchTable) -> Result<Dispatch, CodegenError> {
    let syms = table.fallback.sym_dims();
    if syms != [table.sym.clone()] {
        return Err(CodegenError::BadSignature {
            op: table.fallback.name.clone(),
            msg: format!("dispatch needs `{}` as the only symbolic dim, kernel has {syms:?}", table.sym),
        });
    }
    let mut internal_cost = BTreeMap::new();
    for r in 0..table.tile {
        let extent = (table.tile + r) as i64;
        let (kernel, env) = choose(&table, extent);
        let mut bufs = alloc_buffers(kernel, &env)?;
        let stats = run_kernel(kernel, &env, &mut bufs)?;
        internal_cost.insert(r, stats.cost());
    }
    Ok(Dispatch { table, internal_cost, externals: BTreeMap::new() })
}

fn choose<'a>(table: &'a DispatchTable, extent: i64) -> (&'a KernelIR, HashMap<String, i64>) {
    let r = extent.rem_euclid(table.tile as i64) as u32;
    let mut env = HashMap::new();
    match table.variants.get(&r) {
        Some(v) => {
            env.insert("k".to_string(), (extent - r as i64) / table.tile as i64);
            (v, env)
        }
        None => {
            env.insert(table.sym.clone(), extent);
            (&table.fallback, env)
        }
    }
}

impl Dispatch {
    /// Registers a third-party kernel for one residue with a caller-supplied
    /// cost; it wins the residue whenever that cost beats the probe.
    pub fn register_external(
        &mut self,
        residue: u32,
        name: &str,
        cost: u64,
        run: NativeKernel,
    ) {
        self.externals.insert(residue, External { name: name.to_string(), cost, run });
    }

    pub fn internal_cost(&self, residue: u32) -> Option<u64> {
        self.internal_cost.get(&residue).copied()
    }

    pub fn select(&self, extent: i64) -> Result<Selected, CodegenError> {
        if extent <= 0 {
            return Err(CodegenError::BadExtent(extent));
        }
        let r = extent.rem_euclid(self.table.tile as i64) as u32;
        if let Some(e) = self.externals.get(&r) {
            if e.cost < self.internal_cost[&r] {
                return Ok(Selected::External(e.name.clone()));
            }
        }
        Ok(if self.table.variants.contains_key(&r) {
            Selected::Variant(r)
        } else {
            Selected::Fallback
        })
    }

    /// Runs the selected kernel in place over `bufs`. External kernels
    /// report empty stats; they are not interpreted here.
    pub fn run(
        &self,
        extent: i64,
        bufs: &mut [KernelBuf],
    ) -> Result<(Selected, ExecStats), CodegenError> {
        let sel = self.select(extent)?;
        match &sel {
            Selected::External(_) => {
                let r = extent.rem_euclid(self.table.tile as i64) as u32;
                (self.externals[&r].run)(bufs)?;
                Ok((sel, ExecStats::default()))
            }
            _ => {
                let (kernel, env) = choose(&self.table, extent);
                let stats = run_kernel(kernel, &env, bufs)?;
                Ok((sel, stats))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::kernel::{KData, Schedule};
    use super::super::lower::lower_to_kernel;
    use super::super::tile::{apply_schedule, specialize_residues};
    use super::*;
    use crate::ir::types::{DType, Dim, TensorType};

    fn dense_dispatch(count: u32) -> Dispatch {
        let types = vec![
            TensorType::new(vec![Dim::Any, Dim::Static(4)], DType::F32).unwrap(),
            TensorType::new(vec![Dim::Static(4), Dim::Static(2)], DType::F32).unwrap(),
        ];
        let k = lower_to_kernel("dense", &types).unwrap();
        let mut s = Schedule::identity(k.n_axes);
        s.tiles[0] = 8;
        let tiled = apply_schedule(&k, &s).unwrap();
        build_dispatch(specialize_residues(&tiled, "x0", 8, count).unwrap()).unwrap()
    }

    #[test]
    fn residues_route_to_their_variant_or_the_fallback() {
        let full = dense_dispatch(8);
        assert_eq!(full.select(13).unwrap(), Selected::Variant(5));
        assert_eq!(full.select(8).unwrap(), Selected::Variant(0));
        assert_eq!(full.select(5).unwrap(), Selected::Variant(5));
        let partial = dense_dispatch(4);
        assert_eq!(partial.select(13).unwrap(), Selected::Fallback);
        assert_eq!(partial.select(11).unwrap(), Selected::Variant(3));
        assert!(matches!(full.select(0), Err(CodegenError::BadExtent(0))));
        assert!(matches!(full.select(-3), Err(CodegenError::BadExtent(-3))));
    }

    #[test]
    fn dispatch_runs_match_across_selection_paths() {
        let full = dense_dispatch(8);
        let partial = dense_dispatch(1);
        for x in [3i64, 8, 13, 21] {
            let mut b1 = alloc_dense(x);
            let mut b2 = alloc_dense(x);
            let (s1, st1) = full.run(x, &mut b1).unwrap();
            let (s2, st2) = partial.run(x, &mut b2).unwrap();
            assert_eq!(b1.last(), b2.last(), "x={x}");
            assert_eq!(st1.statements, st2.statements);
            if x % 8 != 0 {
                assert_eq!(s2, Selected::Fallback);
                assert!(
                    st1.guard_evals < st2.guard_evals,
                    "specialized path should check fewer bounds at x={x}"
                );
            } else {
                assert_eq!(s1, Selected::Variant(0));
                assert_eq!(s2, Selected::Variant(0));
            }
            assert!(matches!(s1, Selected::Variant(_)));
        }
    }

    fn alloc_dense(x: i64) -> Vec<KernelBuf> {
        let mut a = KernelBuf::zeros(DType::F32, &[x, 4]);
        if let KData::F32(v) = &mut a.data {
            for (i, p) in v.iter_mut().enumerate() {
                *p = (i % 11) as f32 - 5.0;
            }
        }
        let mut b = KernelBuf::zeros(DType::F32, &[4, 2]);
        if let KData::F32(v) = &mut b.data {
            for (i, p) in v.iter_mut().enumerate() {
                *p = 1.5 - i as f32;
            }
        }
        vec![a, b, KernelBuf::zeros(DType::F32, &[x, 2])]
    }

    #[test]
    fn externals_win_only_when_their_recorded_cost_is_lower() {
        let mut d = dense_dispatch(8);
        let probe = d.internal_cost(5).unwrap();
        let marker: NativeKernel = Arc::new(|bufs: &mut [KernelBuf]| {
            if let KData::F32(v) = &mut bufs[2].data {
                v.fill(42.0);
            }
            Ok(())
        });
        // recorded cost equal to the probe is not enough to take over
        d.register_external(5, "vendor", probe, marker.clone());
        assert_eq!(d.select(13).unwrap(), Selected::Variant(5));
        d.register_external(5, "vendor", probe - 1, marker);
        assert_eq!(d.select(13).unwrap(), Selected::External("vendor".into()));
        let mut bufs = alloc_dense(13);
        let (sel, stats) = d.run(13, &mut bufs).unwrap();
        assert_eq!(sel, Selected::External("vendor".into()));
        assert_eq!(stats, ExecStats::default());
        assert!(matches!(&bufs[2].data, KData::F32(v) if v.iter().all(|&x| x == 42.0)));
        // other residues are untouched
        assert_eq!(d.select(14).unwrap(), Selected::Variant(6));
    }

    #[test]
    fn dispatch_needs_exactly_one_symbolic_dim() {
        let types = vec![
            TensorType::new(vec![Dim::Any, Dim::Any], DType::F32).unwrap(),
            TensorType::new(vec![Dim::Any, Dim::Static(2)], DType::F32).unwrap(),
        ];
        let k = lower_to_kernel("dense", &types).unwrap();
        let mut s = Schedule::identity(k.n_axes);
        s.tiles[0] = 8;
        let tiled = apply_schedule(&k, &s).unwrap();
        let table = specialize_residues(&tiled, "x0", 8, 8).unwrap();
        let Err(err) = build_dispatch(table) else {
            panic!("two symbolic dims should not dispatch");
        };
        assert!(err.to_string().contains("only symbolic dim"), "{err}");
    }
}
