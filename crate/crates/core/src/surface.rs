use crate::grid::Field2D;

/// A field indexed by time node. Time-homogeneous surfaces are stored once.
#[derive(Debug, Clone, PartialEq)]
pub enum TimeSurface {
    Static(Field2D),
    /// One slice per time node; lookups past the end reuse the last slice.
    Nodes(Vec<Field2D>),
}

impl TimeSurface {
    #[inline]
    pub fn at(&self, k: usize) -> &Field2D {
        match self {
            TimeSurface::Static(f) => f,
            TimeSurface::Nodes(v) => &v[k.min(v.len() - 1)],
        }
    }

    pub fn n_slices(&self) -> usize {
        match self {
            TimeSurface::Static(_) => 1,
            TimeSurface::Nodes(v) => v.len(),
        }
    }

    pub fn map(&self, f: impl Fn(&Field2D) -> Field2D) -> TimeSurface {
        match self {
            TimeSurface::Static(s) => TimeSurface::Static(f(s)),
            TimeSurface::Nodes(v) => TimeSurface::Nodes(v.iter().map(f).collect()),
        }
    }

    /// Minimum and maximum over every slice.
    pub fn range(&self) -> (f64, f64) {
        let slices: Vec<&Field2D> = match self {
            TimeSurface::Static(s) => vec![s],
            TimeSurface::Nodes(v) => v.iter().collect(),
        };
        slices
            .iter()
            .flat_map(|s| s.values().iter())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}
