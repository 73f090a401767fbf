"""Semi-automatic mapping of tabular clinical schemas to HL7 FHIR.

The pipeline has three stages: canonicalize the source tables and the FHIR
resource corpus, retrieve candidate resources per table or attribute cluster
with hybrid lexical/embedding ranking fused by RRF, then drive an LLM (or
the offline mock) through a prompt strategy to map each attribute to element
paths, which are validated against the corpus schemas and scored.
"""

from .ingest import (
    AttributeCluster,
    AttributeDescriptor,
    CanonicalDocument,
    FhirResourceDoc,
    TableDescriptor,
    build_element_index,
    canonicalize,
    load_dataset_descriptor,
    load_fhir_corpus,
)
from .lexical import (
    DenseVector,
    EmbeddingProvider,
    HashEmbeddingProvider,
    HttpEmbeddingProvider,
    Ranking,
    SparseVector,
    Vocabulary,
    bm25_score,
    build_bm25,
    build_tfidf,
    cosine_similarity,
    rank_by_model,
    tokenize,
    tokenize_path,
)
from .fusion import FusedRanking, RetrievalResult, retrieve_resources, rrf_fuse
from .clustering import (
    ClusterAssignment,
    FeatureMatrix,
    QualityReport,
    agglomerative,
    calinski_harabasz,
    davies_bouldin,
    dbscan,
    default_grid,
    kmeans,
    select_clustering,
    silhouette,
)

__version__ = "0.1.0"
