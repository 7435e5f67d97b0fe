use ndarray::{Array1, Array2};

/// Coarse grouping of parameter tensors, used by [`TrainMask`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamClass {
    TokenTable,
    ConceptSlots,
    BlockWeight,
    BlockBias,
    HeadWeight,
    HeadBias,
    AdapterDown,
    AdapterUp,
}

impl ParamClass {
    pub const ALL: [ParamClass; 8] = [
        ParamClass::TokenTable,
        ParamClass::ConceptSlots,
        ParamClass::BlockWeight,
        ParamClass::BlockBias,
        ParamClass::HeadWeight,
        ParamClass::HeadBias,
        ParamClass::AdapterDown,
        ParamClass::AdapterUp,
    ];
}

/// Which tensors receive updates in the current stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrainMask {
    pub token_table: bool,
    pub concept_slots: bool,
    pub base_weights: bool,
    pub adapter: bool,
}

impl TrainMask {
    /// Everything except adapter factors: plain pretraining or full fine-tuning.
    pub const FULL: TrainMask = TrainMask {
        token_table: true,
        concept_slots: true,
        base_weights: true,
        adapter: false,
    };

    /// Adapter factors plus the layer-wise concept slots.
    pub const ADAPTER: TrainMask = TrainMask {
        token_table: false,
        concept_slots: true,
        base_weights: false,
        adapter: true,
    };

    pub const NONE: TrainMask = TrainMask {
        token_table: false,
        concept_slots: false,
        base_weights: false,
        adapter: false,
    };

    pub fn allows(&self, class: ParamClass) -> bool {
        match class {
            ParamClass::TokenTable => self.token_table,
            ParamClass::ConceptSlots => self.concept_slots,
            ParamClass::BlockWeight
            | ParamClass::BlockBias
            | ParamClass::HeadWeight
            | ParamClass::HeadBias => self.base_weights,
            ParamClass::AdapterDown | ParamClass::AdapterUp => self.adapter,
        }
    }

    pub fn is_empty(&self) -> bool {
        *self == TrainMask::NONE
    }
}

/// `y = W x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Affine {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Affine {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

/// Low-rank update `B·A` added to a block weight. `down` is A (rank×in),
/// `up` is B (out×rank).
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankAdapter {
    pub down: Array2<f64>,
    pub up: Array2<f64>,
}

impl LowRankAdapter {
    pub fn rank(&self) -> usize {
        self.down.nrows()
    }
}

/// Every tensor of a velocity network. Also used, with identical shapes, to
/// hold gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub token_table: Array2<f64>,
    pub concept_slots: Array2<f64>,
    pub blocks: Vec<Affine>,
    pub head: Affine,
    pub adapters: Vec<LowRankAdapter>,
}

/// Borrowed view of one named tensor in canonical order.
pub struct TensorRef<'a> {
    pub name: String,
    pub class: ParamClass,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct TensorMut<'a> {
    pub name: String,
    pub class: ParamClass,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

fn flat1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("parameter tensors are contiguous")
}

fn flat2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("parameter tensors are contiguous")
}

fn t2(name: String, class: ParamClass, a: &Array2<f64>) -> TensorRef<'_> {
    TensorRef {
        name,
        class,
        shape: a.shape().to_vec(),
        data: flat2(a),
    }
}

fn t1(name: String, class: ParamClass, a: &Array1<f64>) -> TensorRef<'_> {
    TensorRef {
        name,
        class,
        shape: a.shape().to_vec(),
        data: flat1(a),
    }
}

fn flat1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameter tensors are contiguous")
}

fn flat2_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("parameter tensors are contiguous")
}

impl Params {
    pub fn zeros_like(&self) -> Params {
        Params {
            token_table: Array2::zeros(self.token_table.raw_dim()),
            concept_slots: Array2::zeros(self.concept_slots.raw_dim()),
            blocks: self
                .blocks
                .iter()
                .map(|b| Affine::zeros(b.out_dim(), b.in_dim()))
                .collect(),
            head: Affine::zeros(self.head.out_dim(), self.head.in_dim()),
            adapters: self
                .adapters
                .iter()
                .map(|a| LowRankAdapter {
                    down: Array2::zeros(a.down.raw_dim()),
                    up: Array2::zeros(a.up.raw_dim()),
                })
                .collect(),
        }
    }

    /// All tensors in canonical (checkpoint) order.
    pub fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::with_capacity(4 + 2 * self.blocks.len() + 2 * self.adapters.len());
        out.push(t2(
            "token_table".into(),
            ParamClass::TokenTable,
            &self.token_table,
        ));
        out.push(t2(
            "concept_slots".into(),
            ParamClass::ConceptSlots,
            &self.concept_slots,
        ));
        for (l, b) in self.blocks.iter().enumerate() {
            out.push(t2(
                format!("blocks.{l}.weight"),
                ParamClass::BlockWeight,
                &b.weight,
            ));
            out.push(t1(format!("blocks.{l}.bias"), ParamClass::BlockBias, &b.bias));
        }
        out.push(t2(
            "head.weight".into(),
            ParamClass::HeadWeight,
            &self.head.weight,
        ));
        out.push(t1("head.bias".into(), ParamClass::HeadBias, &self.head.bias));
        for (l, a) in self.adapters.iter().enumerate() {
            out.push(t2(
                format!("adapters.{l}.down"),
                ParamClass::AdapterDown,
                &a.down,
            ));
            out.push(t2(format!("adapters.{l}.up"), ParamClass::AdapterUp, &a.up));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut out = Vec::new();
        let shape2 = |a: &Array2<f64>| a.shape().to_vec();
        let shape1 = |a: &Array1<f64>| a.shape().to_vec();
        let s = shape2(&self.token_table);
        out.push(TensorMut {
            name: "token_table".into(),
            class: ParamClass::TokenTable,
            shape: s,
            data: flat2_mut(&mut self.token_table),
        });
        let s = shape2(&self.concept_slots);
        out.push(TensorMut {
            name: "concept_slots".into(),
            class: ParamClass::ConceptSlots,
            shape: s,
            data: flat2_mut(&mut self.concept_slots),
        });
        for (l, b) in self.blocks.iter_mut().enumerate() {
            let s = shape2(&b.weight);
            out.push(TensorMut {
                name: format!("blocks.{l}.weight"),
                class: ParamClass::BlockWeight,
                shape: s,
                data: flat2_mut(&mut b.weight),
            });
            let s = shape1(&b.bias);
            out.push(TensorMut {
                name: format!("blocks.{l}.bias"),
                class: ParamClass::BlockBias,
                shape: s,
                data: flat1_mut(&mut b.bias),
            });
        }
        let s = shape2(&self.head.weight);
        out.push(TensorMut {
            name: "head.weight".into(),
            class: ParamClass::HeadWeight,
            shape: s,
            data: flat2_mut(&mut self.head.weight),
        });
        let s = shape1(&self.head.bias);
        out.push(TensorMut {
            name: "head.bias".into(),
            class: ParamClass::HeadBias,
            shape: s,
            data: flat1_mut(&mut self.head.bias),
        });
        for (l, a) in self.adapters.iter_mut().enumerate() {
            let s = shape2(&a.down);
            out.push(TensorMut {
                name: format!("adapters.{l}.down"),
                class: ParamClass::AdapterDown,
                shape: s,
                data: flat2_mut(&mut a.down),
            });
            let s = shape2(&a.up);
            out.push(TensorMut {
                name: format!("adapters.{l}.up"),
                class: ParamClass::AdapterUp,
                shape: s,
                data: flat2_mut(&mut a.up),
            });
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Gradients of a scalar objective with respect to a network's parameters.
/// Tensors excluded by `mask` are all-zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub params: Params,
    pub mask: TrainMask,
}

impl Gradients {
    pub fn zeros_for(params: &Params, mask: TrainMask) -> Self {
        Gradients {
            params: params.zeros_like(),
            mask,
        }
    }

    /// `self += other`, tensor by tensor in canonical order.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (dst, src) in self.params.tensors_mut().into_iter().zip(other.params.tensors()) {
            debug_assert_eq!(dst.shape, src.shape);
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d += s;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.params
            .tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| *v == 0.0))
    }

    pub fn get(&self, name: &str) -> Option<Vec<f64>> {
        self.params
            .tensors()
            .into_iter()
            .find(|t| t.name == name)
            .map(|t| t.data.to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.params
            .tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}
