from id_match.testing.graph import naive_oracle_img
from id_match.testing.graph import consistency_score
from id_match.testing.numcore import matmul, row_softmax, elementwise, masked_sum, squared_error
