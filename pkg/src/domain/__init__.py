# domain package

