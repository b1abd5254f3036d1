"""Partition trees, product-manifold forests, sparse and anti-sparse coding, novelty detection."""

__version__ = "0.1.0"

from ._backend import BACKEND
from .antisparse import (AnnIndex, ProductAnnIndex, SpreadCode, ann_query, antisparse_encode, binarize,
                         build_ann_index, build_product_ann, calibrate_lambda, linf_encode_exact,
                         negation_symmetry_check, pack_codes, product_ann_query, unpack_codes)
from .datasets import Dataset, DatasetSpec, generate, read_vectors, write_vectors
from .metrics import BenchResult, auc, brute_force_knn, recall_at_k, spearman
from .novelty import (EscapeEvent, NoveltyModel, NoveltyReport, continual_loop, escape_insert,
                      fit_novelty_model, novelty_score)
from .numerics import hard_threshold, make_rng, project_l1_ball, prox_linf, soft_threshold
from .partition import (ConvexDiffClassifier, Hyperplane, PartitionTree, build_tree, nn_exact,
                        nn_exact_batch, query_leaf, xor_decompose)
from .persistence import IndexBundle, load_index, save_index
from .product_index import (BlockPartition, PMForest, PMTree, build_pm_forest, build_pm_tree, forest_knn,
                            intersect_candidates, pm_knn, product_cell)
from .sparse_coding import (CompositeDictionary, Dictionary, MLCSCStack, SparseCode, basis_pursuit,
                            compose_direct_sum, compose_product_atoms, hierarchical_csc_encode,
                            incoherent_dictionary, ml_csc_forward, ml_csc_reconstruct, random_dictionary)
