#
# Copyright (c) the fargan authors.
# SPDX-License-Identifier: Apache-2.0
#
