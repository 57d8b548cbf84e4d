# Test suite for aqa-transformer
