//! Type vocabulary: dtypes, dimensions that may be statically unknown,
//! tensor types, and devices.

use crate::error::TypeError;
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DType {
    F32,
    I64,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::I64 => 8,
        }
    }

    pub fn parse(s: &str) -> Option<DType> {
        match s {
            "f32" | "float32" => Some(DType::F32),
            "i64" | "int64" => Some(DType::I64),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => write!(f, "f32"),
            DType::I64 => write!(f, "i64"),
        }
    }
}

/// One dimension of a tensor type. `Any` is statically unknown and printed
/// as `?`; static extents are at least 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dim {
    Static(u64),
    Any,
}

impl Dim {
    pub fn is_static(self) -> bool {
        matches!(self, Dim::Static(_))
    }

    pub fn extent(self) -> Option<u64> {
        match self {
            Dim::Static(d) => Some(d),
            Dim::Any => None,
        }
    }
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dim::Static(d) => write!(f, "{d}"),
            Dim::Any => write!(f, "?"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TensorType {
    pub dims: Vec<Dim>,
    pub dtype: DType,
}

impl TensorType {
    /// Zero extents are invalid and rejected here; every construction site
    /// that accepts external input goes through this.
    pub fn new(dims: Vec<Dim>, dtype: DType) -> Result<TensorType, TypeError> {
        if dims.iter().any(|d| matches!(d, Dim::Static(0))) {
            return Err(TypeError::new("tensor dimensions must be at least 1"));
        }
        Ok(TensorType { dims, dtype })
    }

    pub fn statics(dims: &[u64], dtype: DType) -> TensorType {
        assert!(dims.iter().all(|&d| d >= 1), "zero extent");
        TensorType { dims: dims.iter().map(|&d| Dim::Static(d)).collect(), dtype }
    }

    pub fn scalar(dtype: DType) -> TensorType {
        TensorType { dims: Vec::new(), dtype }
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn is_fully_static(&self) -> bool {
        self.dims.iter().all(|d| d.is_static())
    }

    /// Concrete shape when every dimension is static.
    pub fn static_shape(&self) -> Option<Vec<usize>> {
        self.dims.iter().map(|d| d.extent().map(|e| e as usize)).collect()
    }

    pub fn num_elements(&self) -> Option<u64> {
        self.dims.iter().try_fold(1u64, |acc, d| d.extent().map(|e| acc * e))
    }

    pub fn size_bytes(&self) -> Option<u64> {
        self.num_elements().map(|n| n * self.dtype.size_bytes() as u64)
    }
}

impl fmt::Display for TensorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<(")?;
        for (i, d) in self.dims.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "), {}>", self.dtype)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Type {
    Tensor(TensorType),
    Tuple(Vec<Type>),
    /// Algebraic data type value; constructors are module-scoped, so values
    /// are typed by the open `adt` kind rather than a nominal family.
    Adt,
    Fn { params: Vec<Type>, ret: Box<Type> },
    /// Raw storage block handle produced by `alloc_storage`.
    Storage,
}

impl Type {
    pub fn unit() -> Type {
        Type::Tuple(Vec::new())
    }

    pub fn tensor(&self) -> Option<&TensorType> {
        match self {
            Type::Tensor(t) => Some(t),
            _ => None,
        }
    }
}

impl fmt::Display for Type {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Type::Tensor(t) => write!(f, "{t}"),
            Type::Tuple(ts) => {
                write!(f, "(")?;
                for (i, t) in ts.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{t}")?;
                }
                write!(f, ")")
            }
            Type::Adt => write!(f, "adt"),
            Type::Fn { params, ret } => {
                write!(f, "fn(")?;
                for (i, t) in params.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{t}")?;
                }
                write!(f, ") -> {ret}")
            }
            Type::Storage => write!(f, "storage"),
        }
    }
}

/// Execution device. `Dev(0)` is the accelerator arena selected by target
/// `dev0`; tensors there are only reachable from the host via `device_copy`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Device {
    Cpu,
    Dev(u32),
}

impl Device {
    pub fn code(self) -> u8 {
        match self {
            Device::Cpu => 0,
            Device::Dev(i) => 1 + i as u8,
        }
    }

    pub fn from_code(c: u8) -> Device {
        match c {
            0 => Device::Cpu,
            i => Device::Dev((i - 1) as u32),
        }
    }

    pub fn parse(s: &str) -> Option<Device> {
        if s == "cpu" {
            return Some(Device::Cpu);
        }
        s.strip_prefix("dev").and_then(|i| i.parse().ok()).map(Device::Dev)
    }
}

impl fmt::Display for Device {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Device::Cpu => write!(f, "cpu"),
            Device::Dev(i) => write!(f, "dev{i}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_extent_rejected() {
        assert!(TensorType::new(vec![Dim::Static(0)], DType::F32).is_err());
        assert!(TensorType::new(vec![Dim::Static(1), Dim::Any], DType::F32).is_ok());
    }

    #[test]
    fn display_forms() {
        let t = TensorType { dims: vec![Dim::Static(1), Dim::Static(10), Dim::Any], dtype: DType::F32 };
        assert_eq!(t.to_string(), "Tensor<(1, 10, ?), f32>");
        assert_eq!(Device::Dev(0).to_string(), "dev0");
        assert_eq!(Type::unit().to_string(), "()");
    }

    #[test]
    fn device_codes_roundtrip() {
        for d in [Device::Cpu, Device::Dev(0), Device::Dev(3)] {
            assert_eq!(Device::from_code(d.code()), d);
        }
    }

    #[test]
    fn size_of_partially_static_is_unknown() {
        let t = TensorType { dims: vec![Dim::Any, Dim::Static(2)], dtype: DType::F32 };
        assert_eq!(t.size_bytes(), None);
        let s = TensorType::statics(&[10], DType::F32);
        assert_eq!(s.size_bytes(), Some(40));
    }
}
