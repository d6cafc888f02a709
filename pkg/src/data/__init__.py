# data package

